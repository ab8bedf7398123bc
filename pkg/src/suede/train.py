"""Warm-up-then-convert training, scoring and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ExperimentConfig
from .data import ProtocolSplit, build_protocol, prompt_for, stack
from .errors import ConfigError, TrainingDivergedError
from .metrics import MetricReport, evaluate_scores
from .model import DualEncoder, build_model, class_score, convert_to_sue, similarity_matrix, sue_layers
from .moe import aux_losses, expert_utilization, total_loss
from .rng import SplitMix64, mix64
from .tensor import no_grad, zero_grad
from .text import PromptBank

log = logging.getLogger(__name__)


class Adam:
    """Adam with per-parameter step counts, keyed by parameter name."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.state: dict[str, list] = {}

    def step(self, named_params) -> None:
        for name, p in named_params:
            if p.grad is None:
                continue
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = [np.zeros_like(p.data), np.zeros_like(p.data), 0]
            m, v, t = st
            t += 1
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * (p.grad * p.grad)
            mhat = m / (1 - self.b1**t)
            vhat = v / (1 - self.b2**t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            st[2] = t

    def rename(self, old_prefix: str, new_prefix: str) -> None:
        """Carry moment estimates over when parameters move in the module tree."""
        for name in [n for n in self.state if n.startswith(old_prefix)]:
            self.state[new_prefix + name[len(old_prefix) :]] = self.state.pop(name)

    def state_dict(self) -> dict:
        return {n: (m.copy(), v.copy(), t) for n, (m, v, t) in self.state.items()}

    def load_state_dict(self, state: dict) -> None:
        self.state = {n: [np.array(m), np.array(v), int(t)] for n, (m, v, t) in state.items()}


def _frozen(name: str, groups) -> bool:
    return any(f".{g}." in name for g in groups)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        c = max_norm / (norm + 1e-12)
        for g in grads:
            g *= c
    return norm


def load_bank(cfg: ExperimentConfig) -> PromptBank:
    return PromptBank.load(cfg.prompt_bank) if cfg.prompt_bank else PromptBank.default()


def make_split(cfg: ExperimentConfig) -> ProtocolSplit:
    counts = {"train": cfg.n_train, "dev": cfg.n_dev, "test": cfg.n_test}
    return build_protocol(cfg.protocol, counts, cfg.held_out or None, master_seed=cfg.seed)


def init_model(cfg: ExperimentConfig):
    """Freshly initialised, unconverted model for ``cfg.seed``."""
    return build_model(cfg.model_dims(), SplitMix64(cfg.seed).child("init"))


def convert(model, cfg: ExperimentConfig) -> None:
    """Install SUE layers at the configured blocks (deterministic in ``cfg.seed``)."""
    rng = SplitMix64(cfg.seed).child("convert")
    for branch, layers in (("image", cfg.image_sue_layers), ("text", cfg.text_sue_layers)):
        if layers:
            convert_to_sue(
                model,
                branch,
                layers,
                rng.child(branch),
                n_experts=cfg.n_experts,
                k=cfg.k,
                shared=cfg.shared_expert,
                zero_routed=cfg.zero_routed_init,
                renormalize=cfg.renormalize_topk,
            )


def build_converted(cfg: ExperimentConfig):
    model = init_model(cfg)
    convert(model, cfg)
    return model


def _ffn_prefixes(cfg) -> list[str]:
    return [f"vision.blocks.{i}.ffn." for i in cfg.image_sue_layers] + [
        f"text.blocks.{i}.ffn." for i in cfg.text_sue_layers
    ]


def score_images(model, images: np.ndarray, bank: PromptBank, chunk: int = 256):
    """Fake-scores and, per SUE layer, the selected-expert arrays."""
    n_layers = len(sue_layers(model))
    selections: list[list[np.ndarray]] = [[] for _ in range(n_layers)]
    scores = []
    with no_grad():
        if isinstance(model, DualEncoder):
            bank.validate()
            real, fake = bank.real, bank.fake_all()
            txt, _ = model.encode_text(real + fake)
        for start in range(0, len(images), chunk):
            x = images[start : start + chunk]
            if isinstance(model, DualEncoder):
                emb, routers = model.encode_image(x)
                s = similarity_matrix(emb, txt, model.logit_scale).data
                sims = np.stack([s[:, : len(real)].max(axis=1), s[:, len(real) :].max(axis=1)], axis=1)
                scores.append(class_score(sims))
            else:
                logits, routers = model.logits(x)
                scores.append(class_score(logits.data))
            for i, r in enumerate(routers):
                selections[i].append(r.selected)
    return np.concatenate(scores), selections


def utilization(model, selections) -> tuple[list[list[float]], list[float]]:
    fracs, ents = [], []
    for layer, sel in zip(sue_layers(model), selections):
        if not sel:
            continue
        f, e = expert_utilization(sel, len(layer.routed))
        fracs.append(f.tolist())
        ents.append(e)
    return fracs, ents


def evaluate(model, samples, bank: PromptBank, threshold: float = 0.5) -> MetricReport:
    """Metric report over ``samples`` plus per-family APCER and router entropy."""
    images, labels = stack(samples)
    scores, selections = score_images(model, images, bank)
    report = evaluate_scores(scores, labels, threshold)
    families = np.array([s.family for s in samples])
    for fam in ("physical", "digital"):
        m = families == fam
        report.extra[f"apcer_{fam}"] = float(np.mean(scores[m] < threshold)) if m.any() else None
    _, ents = utilization(model, selections)
    report.extra["util_entropy_mean"] = float(np.mean(ents)) if ents else None
    return report


@dataclass
class TrainResult:
    model: object
    config: ExperimentConfig
    history: list[dict]
    optimizer: Adam
    best_epoch: int
    prng_state: int
    split: ProtocolSplit = field(repr=False)
    bank: PromptBank = field(repr=False, default_factory=PromptBank.default)

    @property
    def epoch(self) -> int:
        return self.best_epoch + 1 if self.best_epoch >= 0 else 0


def lr_at(cfg: ExperimentConfig, step: int, total_steps: int) -> float:
    """Linear warm-up over ``lr_warmup_steps`` then, for ``cosine``, decay to 0 at ``total_steps``."""
    lr = cfg.lr * min(1.0, (step + 1) / max(cfg.lr_warmup_steps, 1))
    if cfg.lr_schedule == "cosine" and total_steps > 0:
        lr *= 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))
    return lr


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def _batch_seed(seed: int, epoch: int, batch: int) -> int:
    return mix64(mix64(seed ^ (epoch << 32)) ^ batch)


def _run_epoch(model, opt, cfg, images, labels, prompts, rng, epoch, out_dir, total_steps=0):
    n = len(images)
    ep_rng = rng.child("epoch", epoch)
    perm = ep_rng.permutation(n)
    flips = ep_rng.child("hflip").uniform((n,)) < 0.5 if cfg.hflip else np.zeros(n, dtype=bool)
    step0 = epoch * steps_per_epoch(n, cfg.batch_size)
    frozen = set(cfg.freeze)
    named = [(nm, p) for nm, p in model.named_parameters() if not _frozen(nm, frozen)]
    trainable = [p for _, p in named]
    sums = {"l_ce": 0.0, "l_z": 0.0, "l_b": 0.0, "total": 0.0}
    n_batches = 0
    for b, start in enumerate(range(0, n, cfg.batch_size)):
        idx = perm[start : start + cfg.batch_size]
        batch = images[idx]
        flip = flips[start : start + cfg.batch_size]
        if flip.any():
            batch = batch.copy()
            batch[flip] = batch[flip][..., ::-1]
        l_ce, routers = model.loss_terms(batch, labels[idx], [prompts[i] for i in idx], cfg.symmetric_loss)
        l_z, l_b = aux_losses(routers)
        bundle = total_loss(l_ce, l_z, l_b, cfg.alpha, cfg.beta, cfg.gamma)
        vals = bundle.values()
        if not all(math.isfinite(v) for v in vals.values()):
            seed = _batch_seed(cfg.seed, epoch, b)
            diag = {"epoch": epoch, "batch": b, "batch_seed": seed, "losses": vals, "indices": idx.tolist()}
            if out_dir is not None:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                (Path(out_dir) / "diverged.json").write_text(json.dumps(diag, default=str) + "\n")
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch} batch {b} (batch seed {seed})",
                epoch=epoch,
                batch=b,
                batch_seed=seed,
            )
        zero_grad(model.parameters())
        bundle.total.backward()
        if cfg.grad_clip > 0:
            clip_grad_norm(trainable, cfg.grad_clip)
        opt.lr = lr_at(cfg, step0 + b, total_steps)
        opt.step(named)
        for key in sums:
            sums[key] += vals[key]
        n_batches += 1
    zero_grad(model.parameters())
    return {k: v / max(n_batches, 1) for k, v in sums.items()}


def train(
    cfg: ExperimentConfig,
    split: ProtocolSplit | None = None,
    out_dir=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Warm up the plain model, convert the configured blocks, keep training.

    ``epochs`` counts all epochs. The first ``warmup_epochs`` of them train
    the unconverted model; then each configured block's FFN becomes the
    shared expert of a new SueLayer (its Adam moments move with it) and the
    rest run on the full loss. The returned model is the post-conversion
    epoch with the best dev AUC (``select_best``), else the last one. With
    ``epochs=0`` it is the converted initialisation.
    """
    split = split if split is not None else make_split(cfg)
    bank = load_bank(cfg)
    root = SplitMix64(cfg.seed)
    shuffle = root.child("shuffle")
    model = init_model(cfg)
    opt = Adam(cfg.lr, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps)

    images, labels = stack(split.train)
    prompts = [prompt_for(s, bank) for s in split.train]
    dev_images, dev_labels = stack(split.dev)

    history: list[dict] = []
    best = (-1.0, -1, None, None)
    total_epochs = cfg.epochs
    warm = min(cfg.warmup_epochs, total_epochs)
    for epoch in range(total_epochs):
        if epoch == warm and cfg.has_sue:
            _convert_with_state(model, opt, cfg)
        phase = "warmup" if epoch < warm else ("sue" if cfg.has_sue else "plain")
        losses = _run_epoch(
            model, opt, cfg, images, labels, prompts, shuffle, epoch, out_dir,
            total_epochs * steps_per_epoch(len(images), cfg.batch_size),
        )
        dev_scores, selections = score_images(model, dev_images, bank)
        dev = evaluate_scores(dev_scores, dev_labels, cfg.threshold)
        fracs, ents = utilization(model, selections)
        rec = {
            "epoch": epoch,
            "phase": phase,
            **losses,
            "dev_auc": dev.auc,
            "dev_acer": dev.acer,
            "dev_eer": dev.eer,
            "dev_acc": dev.acc,
            "utilization": fracs,
            "entropy": ents,
        }
        history.append(rec)
        log.info("epoch %d [%s] total=%.4f dev_auc=%.4f", epoch, phase, losses["total"], dev.auc)
        if on_epoch is not None:
            on_epoch(rec)
        if epoch >= warm and cfg.select_best and dev.auc > best[0]:
            best = (dev.auc, epoch, model.clone(), opt.state_dict())

    if total_epochs == warm and cfg.has_sue:
        # no phase-2 epoch ran; still hand back the converted architecture
        _convert_with_state(model, opt, cfg)
    if best[2] is not None:
        _, best_epoch, model, opt_state = best
        opt.load_state_dict(opt_state)
    else:
        best_epoch = total_epochs - 1
    return TrainResult(model, cfg, history, opt, best_epoch, shuffle.getstate(), split, bank)


def _convert_with_state(model, opt: Adam, cfg: ExperimentConfig) -> None:
    convert(model, cfg)
    if cfg.shared_expert:
        for prefix in _ffn_prefixes(cfg):
            opt.rename(prefix, prefix + "shared.")
    else:
        for prefix in _ffn_prefixes(cfg):
            for name in [n for n in opt.state if n.startswith(prefix) and ".routed." not in n and ".gate." not in n]:
                del opt.state[name]


def decision_threshold(result_or_model, cfg: ExperimentConfig, split: ProtocolSplit, bank: PromptBank) -> float:
    if cfg.threshold_rule == "fixed":
        return cfg.threshold
    if cfg.threshold_rule == "dev_eer":
        model = getattr(result_or_model, "model", result_or_model)
        images, labels = stack(split.dev)
        scores, _ = score_images(model, images, bank)
        return evaluate_scores(scores, labels).eer_threshold
    raise ConfigError(f"unknown threshold rule {cfg.threshold_rule!r}")


def evaluate_split(model, cfg: ExperimentConfig, split: ProtocolSplit, which: str = "test", bank=None) -> MetricReport:
    bank = bank or load_bank(cfg)
    if model.dims.image_size != split.train[0].image.shape[-1]:
        raise ConfigError("checkpoint image size does not match the split")
    thr = decision_threshold(model, cfg, split, bank)
    report = evaluate(model, split.split(which), bank, thr)
    report.extra = {"protocol": split.name, "split": which, "seed": cfg.seed, **report.extra}
    return report
