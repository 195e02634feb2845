"""The differentiable detector graph.

A four-block convolutional backbone produces a stride-8 feature map; each
proposal is pooled three ways (its own box, the box with the central region
masked out, and an enlarged context box with the original box masked out);
a shared two-layer FC trunk feeds the classification, detection
(frame minus context), per-stage refinement, box-regression, and unit-norm
similarity heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers
from .geometry import Box
from .dataset import rng_for

_STREAM_INIT = 10
_STREAM_DROPBLOCK = 11


@dataclass(frozen=True)
class NetConfig:
    num_classes: int
    stages: int = 3
    channels: tuple[int, ...] = (16, 32, 64, 64)
    fc_width: int = 256
    embed_dim: int = 128
    pool_grid: int = 4
    frame_scale: float = 0.5
    context_scale: float = 1.8
    dropblock_p: float = 0.1
    dropblock_block: int = 2
    dtype: type = np.float32

    @property
    def stride(self) -> int:
        return 8  # three 2x2 max pools

    @property
    def flat_dim(self) -> int:
        return self.pool_grid * self.pool_grid * self.channels[-1]


@dataclass
class NetOutputs:
    """Raw head outputs, proposal-major: rows are proposals."""

    xcls_logits: np.ndarray  # (N, C)
    xdet_logits: np.ndarray  # (N, C)
    ref_logits: list[np.ndarray]  # K x (N, C+1)
    reg: list[np.ndarray]  # K x (N, 4*(C+1))
    embed: np.ndarray | None  # (N, D) unit-norm rows; None when not requested
    roi_fc: np.ndarray = None  # (N, fc_width) trunk rows feeding cls/ref heads
    det_fc: np.ndarray = None  # (N, fc_width) frame minus context trunk rows


@dataclass
class OutputGrads:
    """Gradients w.r.t. every field of :class:`NetOutputs`; zeros by default."""

    xcls_logits: np.ndarray | None = None
    xdet_logits: np.ndarray | None = None
    ref_logits: dict = field(default_factory=dict)  # stage index -> array
    reg: dict = field(default_factory=dict)
    embed: np.ndarray | None = None


class DetectorNetwork:
    """Owns the parameter dict and the forward/backward pair."""

    def __init__(self, cfg: NetConfig, seed: int = 0, params: dict | None = None):
        self.cfg = cfg
        self.params = params if params is not None else self._init_params(seed)
        self._cache = None

    def _init_params(self, seed: int) -> dict[str, np.ndarray]:
        cfg = self.cfg
        rng = rng_for(seed, _STREAM_INIT)
        dt = cfg.dtype
        p: dict[str, np.ndarray] = {}
        cin = 3
        for i, cout in enumerate(cfg.channels, start=1):
            std = np.sqrt(2.0 / (9 * cin))
            p[f"conv{i}_w"] = (rng.standard_normal((3, 3, cin, cout)) * std).astype(dt)
            p[f"conv{i}_b"] = np.zeros(cout, dtype=dt)
            cin = cout
        for name, fan_in, width in (
            ("fc1", cfg.flat_dim, cfg.fc_width),
            ("fc2", cfg.fc_width, cfg.fc_width),
        ):
            std = np.sqrt(2.0 / fan_in)
            p[f"{name}_w"] = (rng.standard_normal((fan_in, width)) * std).astype(dt)
            p[f"{name}_b"] = np.zeros(width, dtype=dt)
        c = cfg.num_classes
        heads = [("cls", c), ("det", c), ("sim", cfg.embed_dim)]
        for k in range(1, cfg.stages + 1):
            heads.append((f"ref{k}", c + 1))
            heads.append((f"reg{k}", 4 * (c + 1)))
        for name, width in heads:
            p[f"{name}_w"] = (rng.standard_normal((cfg.fc_width, width)) * 0.01).astype(dt)
            p[f"{name}_b"] = np.zeros(width, dtype=dt)
        return p

    # -- forward -----------------------------------------------------------

    def _regions_and_masks(self, boxes: np.ndarray, image_hw: tuple[int, int]):
        """Stack [roi, frame, context] regions with their mask rectangles."""
        h, w = image_hw
        n = boxes.shape[0]
        cx = 0.5 * (boxes[:, 0] + boxes[:, 2])
        cy = 0.5 * (boxes[:, 1] + boxes[:, 3])
        hw = 0.5 * (boxes[:, 2] - boxes[:, 0])
        hh = 0.5 * (boxes[:, 3] - boxes[:, 1])

        def scaled(f):
            return np.stack([cx - f * hw, cy - f * hh, cx + f * hw, cy + f * hh], axis=1)

        ctx = scaled(self.cfg.context_scale)
        ctx[:, 0] = np.clip(ctx[:, 0], 0.0, w)
        ctx[:, 1] = np.clip(ctx[:, 1], 0.0, h)
        ctx[:, 2] = np.clip(ctx[:, 2], 0.0, w)
        ctx[:, 3] = np.clip(ctx[:, 3], 0.0, h)
        regions = np.concatenate([boxes, boxes, ctx], axis=0)
        masks = np.full((3 * n, 4), np.nan)
        masks[n : 2 * n] = scaled(self.cfg.frame_scale)  # frame: central part masked
        masks[2 * n :] = boxes  # context: original box masked
        return regions, masks

    def forward(
        self,
        image: np.ndarray,
        boxes: np.ndarray,
        *,
        training: bool = False,
        rng: np.random.Generator | None = None,
        dropblock_u: np.ndarray | None = None,
        need_embed: bool = True,
    ) -> NetOutputs:
        """Run the graph; caches intermediates for one matching backward."""
        cfg = self.cfg
        p = self.params
        x = np.ascontiguousarray(image, dtype=cfg.dtype)
        n = boxes.shape[0]

        conv_caches = []
        for i in range(1, len(cfg.channels) + 1):
            x, cc = layers.conv3x3_forward(x, p[f"conv{i}_w"], p[f"conv{i}_b"])
            x, nc = layers.instancenorm_forward(x)
            x, rc = layers.relu_forward(x)
            pc = None
            if i <= 3:
                x, pc = layers.maxpool2_forward(x)
            conv_caches.append((cc, nc, rc, pc))
        fmap = x

        regions, masks = self._regions_and_masks(
            np.asarray(boxes, dtype=np.float64), image.shape[:2]
        )
        pooled, pool_cache = layers.roi_pool_forward(fmap, regions, masks, float(cfg.stride), cfg.pool_grid)
        roi_p, frame_p, ctx_p = pooled[:n], pooled[n : 2 * n], pooled[2 * n :]

        use_dropblock = training and cfg.dropblock_p > 0.0
        db_cache = None
        if use_dropblock:
            if dropblock_u is None:
                if rng is None:
                    raise ValueError("training forward needs an rng or explicit dropblock_u")
                t = layers.dropblock_tiles(cfg.pool_grid, cfg.dropblock_block)
                dropblock_u = rng.random((n, t, t))
            roi_db, db_cache = layers.dropblock_forward(
                roi_p, dropblock_u.astype(cfg.dtype), cfg.dropblock_p, cfg.dropblock_block
            )
        else:
            roi_db = roi_p

        separate_plain = use_dropblock and need_embed
        trunk_in = [roi_db, frame_p, ctx_p] + ([roi_p] if separate_plain else [])
        flat = np.concatenate(trunk_in, axis=0).reshape(-1, cfg.flat_dim)
        h1_pre, fc1_cache = layers.fc_forward(flat, p["fc1_w"], p["fc1_b"])
        h1, r1_cache = layers.relu_forward(h1_pre)
        h2_pre, fc2_cache = layers.fc_forward(h1, p["fc2_w"], p["fc2_b"])
        h2, r2_cache = layers.relu_forward(h2_pre)

        h_cls = h2[:n]
        h_frame = h2[n : 2 * n]
        h_ctx = h2[2 * n : 3 * n]
        h_plain = h2[3 * n :] if separate_plain else h_cls
        det_in = h_frame - h_ctx

        xcls, cls_cache = layers.fc_forward(h_cls, p["cls_w"], p["cls_b"])
        xdet, det_cache = layers.fc_forward(det_in, p["det_w"], p["det_b"])
        ref_logits, ref_caches, regs, reg_caches = [], [], [], []
        for k in range(1, cfg.stages + 1):
            rl, rc_ = layers.fc_forward(h_cls, p[f"ref{k}_w"], p[f"ref{k}_b"])
            ref_logits.append(rl)
            ref_caches.append(rc_)
            rg, gc = layers.fc_forward(h_cls, p[f"reg{k}_w"], p[f"reg{k}_b"])
            regs.append(rg)
            reg_caches.append(gc)
        if need_embed:
            embed_raw, sim_cache = layers.fc_forward(h_plain, p["sim_w"], p["sim_b"])
            embed, norm_cache = layers.l2norm_rows_forward(embed_raw)
        else:
            embed, sim_cache, norm_cache = None, None, None

        self._cache = dict(
            n=n,
            separate_plain=separate_plain,
            conv_caches=conv_caches,
            pool_cache=pool_cache,
            db_cache=db_cache,
            fc1_cache=fc1_cache,
            r1_cache=r1_cache,
            fc2_cache=fc2_cache,
            r2_cache=r2_cache,
            head_caches=dict(
                cls=cls_cache, det=det_cache, ref=ref_caches, reg=reg_caches, sim=sim_cache
            ),
            norm_cache=norm_cache,
            flat_shape=flat.shape,
            pooled_shape=pooled.shape,
        )
        return NetOutputs(xcls, xdet, ref_logits, regs, embed, roi_fc=h_cls, det_fc=det_in)

    # -- backward ----------------------------------------------------------

    def backward(self, grads: OutputGrads) -> dict[str, np.ndarray]:
        """Parameter gradients for the most recent forward."""
        cfg = self.cfg
        p = self.params
        c = self._cache
        if c is None:
            raise RuntimeError("backward called before forward")
        n = c["n"]
        hw = cfg.fc_width
        dt = cfg.dtype
        g: dict[str, np.ndarray] = {}
        hc = c["head_caches"]

        dh_cls = np.zeros((n, hw), dtype=dt)
        ddet_in = np.zeros((n, hw), dtype=dt)
        dh_plain = np.zeros((n, hw), dtype=dt)

        if grads.embed is not None and c["norm_cache"] is not None:
            dembed_raw = layers.l2norm_rows_backward(grads.embed.astype(dt), c["norm_cache"])
            dh, g["sim_w"], g["sim_b"] = layers.fc_backward(dembed_raw, p["sim_w"], hc["sim"])
            dh_plain += dh
        else:
            g["sim_w"] = np.zeros_like(p["sim_w"])
            g["sim_b"] = np.zeros_like(p["sim_b"])

        if grads.xcls_logits is not None:
            dh, g["cls_w"], g["cls_b"] = layers.fc_backward(
                grads.xcls_logits.astype(dt), p["cls_w"], hc["cls"]
            )
            dh_cls += dh
        else:
            g["cls_w"] = np.zeros_like(p["cls_w"])
            g["cls_b"] = np.zeros_like(p["cls_b"])

        if grads.xdet_logits is not None:
            dh, g["det_w"], g["det_b"] = layers.fc_backward(
                grads.xdet_logits.astype(dt), p["det_w"], hc["det"]
            )
            ddet_in += dh
        else:
            g["det_w"] = np.zeros_like(p["det_w"])
            g["det_b"] = np.zeros_like(p["det_b"])

        for k in range(1, cfg.stages + 1):
            gr = grads.ref_logits.get(k)
            if gr is not None:
                dh, g[f"ref{k}_w"], g[f"ref{k}_b"] = layers.fc_backward(
                    gr.astype(dt), p[f"ref{k}_w"], hc["ref"][k - 1]
                )
                dh_cls += dh
            else:
                g[f"ref{k}_w"] = np.zeros_like(p[f"ref{k}_w"])
                g[f"ref{k}_b"] = np.zeros_like(p[f"ref{k}_b"])
            gg = grads.reg.get(k)
            if gg is not None:
                dh, g[f"reg{k}_w"], g[f"reg{k}_b"] = layers.fc_backward(
                    gg.astype(dt), p[f"reg{k}_w"], hc["reg"][k - 1]
                )
                dh_cls += dh
            else:
                g[f"reg{k}_w"] = np.zeros_like(p[f"reg{k}_w"])
                g[f"reg{k}_b"] = np.zeros_like(p[f"reg{k}_b"])

        # assemble trunk-output gradients in forward stacking order
        parts = [dh_cls, ddet_in, -ddet_in]
        if c["separate_plain"]:
            parts.append(dh_plain)
        else:
            parts[0] = parts[0] + dh_plain
        dh2 = np.concatenate(parts, axis=0)

        dh2 = layers.relu_backward(dh2, c["r2_cache"])
        dh1, g["fc2_w"], g["fc2_b"] = layers.fc_backward(dh2, p["fc2_w"], c["fc2_cache"])
        dh1 = layers.relu_backward(dh1, c["r1_cache"])
        dflat, g["fc1_w"], g["fc1_b"] = layers.fc_backward(dh1, p["fc1_w"], c["fc1_cache"])

        dpooled = dflat.reshape(-1, cfg.pool_grid, cfg.pool_grid, cfg.channels[-1])
        droi_db = dpooled[:n]
        dframe = dpooled[n : 2 * n]
        dctx = dpooled[2 * n : 3 * n]
        if c["db_cache"] is not None:
            droi = layers.dropblock_backward(droi_db, c["db_cache"])
        else:
            droi = droi_db.copy()
        if c["separate_plain"]:
            droi = droi + dpooled[3 * n :]
        dpool_all = np.concatenate([droi, dframe, dctx], axis=0)
        dfmap = layers.roi_pool_backward(dpool_all, c["pool_cache"])

        dx = dfmap
        for i in range(len(cfg.channels), 0, -1):
            cc, nc, rc, pc = c["conv_caches"][i - 1]
            if pc is not None:
                dx = layers.maxpool2_backward(dx, pc)
            dx = layers.relu_backward(dx, rc)
            dx = layers.instancenorm_backward(dx, nc)
            dx, g[f"conv{i}_w"], g[f"conv{i}_b"] = layers.conv3x3_backward(
                dx, p[f"conv{i}_w"], cc
            )
        return g

    # -- helpers -----------------------------------------------------------

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def astype(self, dtype) -> "DetectorNetwork":
        """Clone with parameters cast to ``dtype`` (e.g. float64 for checks)."""
        cfg = NetConfig(**{**self.cfg.__dict__, "dtype": dtype})
        return DetectorNetwork(cfg, params={k: v.astype(dtype) for k, v in self.params.items()})


def context_frame_regions(cfg: NetConfig, box: Box, image_hw: tuple[int, int]):
    """The (roi, frame, context) region/mask rectangles for one box."""
    h, w = image_hw
    frame_mask = box.scaled(cfg.frame_scale)
    ctx = box.scaled(cfg.context_scale).clipped(w, h)
    return (box, None), (box, frame_mask), (ctx, box)
