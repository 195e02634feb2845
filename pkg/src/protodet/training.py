"""The training loop: scoring, bank maintenance, sampling, losses, SGD.

One image per step. Per-step randomness comes from a counter-keyed stream
(seed, step), so resumed runs and fresh runs follow identical trajectories;
BLAS thread pools are pinned to one thread inside the loop so checkpoint
bytes do not depend on the ambient environment.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import contrast, mil, sampling
from .bank import PrototypeBank, select_negative_prototypes, select_positive_prototypes
from .config import TrainConfig, serialize_config
from .dataset import Dataset, TrainView, load as load_dataset, rng_for
from .errors import NumericalError
from .network import DetectorNetwork, NetConfig, OutputGrads
from . import npa

_STREAM_STEP = 20


@dataclass
class TrainState:
    net: DetectorNetwork
    bank: PrototypeBank
    velocity: dict[str, np.ndarray]
    iteration: int
    config: TrainConfig


def init_state(num_classes: int, config: TrainConfig) -> TrainState:
    net_cfg = NetConfig(
        num_classes=num_classes, stages=config.stages, dropblock_p=config.dropblock_p
    )
    net = DetectorNetwork(net_cfg, seed=config.seed)
    bank = PrototypeBank(
        num_classes,
        capacity=config.bank_size,
        dim=net_cfg.embed_dim,
        momentum=config.bank_momentum,
    )
    velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    return TrainState(net, bank, velocity, 0, config)


def learning_rate(config: TrainConfig, iteration: int) -> float:
    decay_point = int(config.lr_decay_at * config.iterations)
    return config.lr * (0.1 if iteration >= decay_point else 1.0)


def train_step(state: TrainState, view: TrainView) -> dict:
    """One SGD step on one image; returns the per-step metrics row."""
    cfg = state.config
    net = state.net
    boxes = view.proposals.array
    rng = rng_for(cfg.seed, _STREAM_STEP, state.iteration)
    warm = state.iteration >= cfg.warmup_iterations

    out = net.forward(
        view.image, boxes, training=True, rng=rng, need_embed=cfg.bank_active
    )
    bundle = mil.score_bundle(out.xcls_logits, out.xdet_logits)
    l_mil, dphi = mil.mil_loss(bundle.phi, view.labels)
    dxcls, dxdet = mil.mil_backward(bundle, dphi)

    selected_pos: list = []
    if cfg.bank_active:
        selected_pos = select_positive_prototypes(bundle.fused, out.embed, view.labels)
        for c, vec, _ in selected_pos:
            state.bank.update(c, "pos", vec)
        if cfg.bank_negatives:
            for c, vec, _ in select_negative_prototypes(
                bundle.fused, out.embed, view.labels, cfg.bank_score_floor
            ):
                state.bank.update(c, "neg", vec)

    pls_result = None
    if cfg.pls_enabled and warm:
        pls_result = sampling.run_pls(
            state.bank, bundle.fused, out.embed, view.labels, boxes, cfg.pls_discard_rule
        )

    l_refs, ref_grads, reg_grads = [], {}, {}
    prev_scores = bundle.fused
    for k in range(1, cfg.stages + 1):
        plan = mil.generate_pseudo_labels(prev_scores, view.labels, boxes, pls_result)
        l_k, dlogits, dreg = mil.refine_loss(out.ref_logits[k - 1], out.reg[k - 1], plan)
        l_refs.append(l_k)
        ref_grads[k] = dlogits
        reg_grads[k] = dreg
        prev_scores = mil.refine_probs(out.ref_logits[k - 1])

    l_cont = 0.0
    dembed = None
    if cfg.lam > 0.0 and warm and selected_pos:
        anchors, sources = contrast.build_anchors(
            state.bank, selected_pos, rng, cfg.aug_sigma, cfg.aug_dropout
        )
        l_cont, anchor_grads = contrast.contrastive_loss(anchors, cfg.temperature)
        dembed = np.zeros_like(out.embed, dtype=np.float64)
        # anchors come in (plain, view1, view2) triples sharing one cache
        for i in range(0, len(anchors), 3):
            m, _ = sources[i]
            _, (tag1, cache) = sources[i + 1]
            dembed[m] += cfg.lam * (
                anchor_grads[i]
                + contrast.augment_backward(anchor_grads[i + 1], anchor_grads[i + 2], cache)
            )

    l_total = contrast.total_loss(l_mil, l_refs, l_cont, cfg.lam)
    if not math.isfinite(l_total):
        raise NumericalError(
            f"non-finite loss at iteration {state.iteration} on {view.image_id}: "
            f"L_mil={l_mil} L_ref={l_refs} L_cont={l_cont}"
        )

    grads = net.backward(
        OutputGrads(
            xcls_logits=dxcls,
            xdet_logits=dxdet,
            ref_logits=ref_grads,
            reg=reg_grads,
            embed=dembed,
        )
    )

    lr = learning_rate(cfg, state.iteration)
    for name, p in net.params.items():
        g = grads[name] + cfg.weight_decay * p
        v = state.velocity[name]
        v *= cfg.momentum
        v += g
        p -= lr * v

    state.iteration += 1
    row = {"iter": state.iteration, "L_mil": l_mil}
    for k, l_k in enumerate(l_refs, start=1):
        row[f"L_ref_{k}"] = l_k
    row["L_cont"] = l_cont
    row["L_total"] = l_total
    row["bank_pos_fill"] = state.bank.pos_fill()
    row["bank_neg_fill"] = state.bank.neg_fill()
    return row


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    arrays = {f"param/{k}": v for k, v in state.net.params.items()}
    arrays.update({f"velocity/{k}": v for k, v in state.velocity.items()})
    for c in range(state.bank.num_classes):
        arrays[f"bank/pos_{c}"] = state.bank.pos_matrix(c).astype(np.float32)
        arrays[f"bank/neg_{c}"] = state.bank.neg_matrix(c).astype(np.float32)
        arrays[f"bank/pos_counts_{c}"] = np.asarray(state.bank.pos_counts[c], dtype=np.int32)
        arrays[f"bank/neg_counts_{c}"] = np.asarray(state.bank.neg_counts[c], dtype=np.int32)
    meta = {
        "iteration": state.iteration,
        "num_classes": state.net.cfg.num_classes,
        "config": serialize_config(state.config),
    }
    npa.write_bundle(path, arrays, meta)


def load_checkpoint(path: str | Path) -> TrainState:
    from .config import load_config, parse_assignments

    arrays, meta = npa.read_bundle(path)
    cfg = TrainConfig(**parse_assignments(meta["config"].splitlines()))
    state = init_state(meta["num_classes"], cfg)
    for k in state.net.params:
        state.net.params[k] = arrays[f"param/{k}"]
        state.velocity[k] = arrays[f"velocity/{k}"]
    bank = state.bank
    for c in range(bank.num_classes):
        bank.pos[c] = [row.astype(np.float64) for row in arrays[f"bank/pos_{c}"]]
        bank.neg[c] = [row.astype(np.float64) for row in arrays[f"bank/neg_{c}"]]
        bank.pos_counts[c] = [int(v) for v in arrays[f"bank/pos_counts_{c}"]]
        bank.neg_counts[c] = [int(v) for v in arrays[f"bank/neg_counts_{c}"]]
    state.iteration = meta["iteration"]
    return state


# ---------------------------------------------------------------------------
# full runs


def run_training(
    data: Dataset | str | Path,
    out_dir: str | Path,
    config: TrainConfig,
    resume: bool = False,
    log_every: int = 200,
    quiet: bool = False,
) -> TrainState:
    """Train to ``config.iterations``, writing metrics, checkpoints, bank."""
    config.validate()
    dataset = data if isinstance(data, Dataset) else load_dataset(data)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(serialize_config(config))

    final_path = out / "checkpoint_final.npb"
    if resume and final_path.exists():
        return load_checkpoint(final_path)

    state = None
    if resume:
        done = sorted(out.glob("checkpoint_[0-9]*.npb"))
        if done:
            state = load_checkpoint(done[-1])
    if state is None:
        state = init_state(dataset.num_classes, config)

    metrics_path = out / "metrics.jsonl"
    mode = "a" if (resume and state.iteration > 0) else "w"
    per_epoch = len(dataset)
    with threadpool_limits(limits=1):
        with metrics_path.open(mode) as metrics:
            order: list = []
            while state.iteration < config.iterations:
                epoch = state.iteration // per_epoch
                if state.iteration % per_epoch == 0 or not order:
                    order = dataset.shuffled(config.seed * 100003 + epoch)
                    order = order[state.iteration % per_epoch :]
                record = order.pop(0)
                row = train_step(state, record.train_view())
                metrics.write(json.dumps(row) + "\n")
                if not quiet and state.iteration % log_every == 0:
                    print(
                        f"iter {row['iter']:6d}  L_total {row['L_total']:.4f}  "
                        f"L_mil {row['L_mil']:.4f}  bank {row['bank_pos_fill']}/{row['bank_neg_fill']}"
                    )
                if state.iteration % config.checkpoint_every == 0:
                    save_checkpoint(state, out / f"checkpoint_{state.iteration:06d}.npb")
    save_checkpoint(state, final_path)
    state.bank.save(out / "bank_final.npb")
    return state
