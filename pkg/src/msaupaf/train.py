"""Seeded RMSProp training, prediction and the learning-rate schedule."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import autodiff as ad
from .chargrid import AugmentConfig, CharGrid, CharVocab, augment, build_vocab, rasterize
from .config import dump_kv
from .decoder import DecodeConfig, DecodedForm, decode
from .funsd_io import FormDocument
from .net import MSAUPAF, NetConfig, load_params
from .targets import GridGeometry, LossError, LossWeights, TargetFields, collate_targets, encode_targets, total_loss

logger = logging.getLogger(__name__)

CHECKPOINT = "model.mspw"
VOCAB = "vocab.txt"
CONFIG = "config.txt"
LOG = "train.log"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    learning_rate: float = 1e-3
    lr_decay: str = "power"  # "power" | "multiplier"
    decay_every: int = 10
    decay_power: float = 0.9
    rms_alpha: float = 0.9
    rms_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 10
    target_radius: float = 1.0
    target_median_height: float = 3
    vocab_size: int = 90
    p_char_replace: float = 0.02
    max_shift: int = 0
    rotation_deg: float = 0.0
    shear: float = 0.0
    pad_max: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.lr_decay not in ("power", "multiplier"):
            raise ValueError("lr_decay must be 'power' or 'multiplier'")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step size for a 0-based epoch, decayed every ``decay_every`` epochs.

    power:      lr * (1 - floor(e / k) * k / epochs) ** p
    multiplier: lr * p ** floor(e / k)
    """
    steps = epoch // cfg.decay_every
    if cfg.lr_decay == "multiplier":
        return cfg.learning_rate * cfg.decay_power**steps
    horizon = max(cfg.epochs, 1)
    frac = max(0.0, 1.0 - steps * cfg.decay_every / horizon)
    return cfg.learning_rate * frac**cfg.decay_power


def schedule_formula(cfg: TrainConfig) -> str:
    k = cfg.decay_every
    if cfg.lr_decay == "multiplier":
        return f"lr(e) = {cfg.learning_rate} * {cfg.decay_power} ** floor(e / {k})"
    return f"lr(e) = {cfg.learning_rate} * (1 - floor(e / {k}) * {k} / {cfg.epochs}) ** {cfg.decay_power}"


def augment_config(cfg: TrainConfig, vocab: CharVocab) -> AugmentConfig | None:
    if not (cfg.p_char_replace or cfg.max_shift or cfg.rotation_deg or cfg.shear or cfg.pad_max):
        return None
    return AugmentConfig(
        p_char_replace=cfg.p_char_replace,
        replacement_chars=vocab.to_text(),
        max_shift=cfg.max_shift,
        rotation_deg=cfg.rotation_deg,
        shear=cfg.shear,
        pad_range=(0, cfg.pad_max),
        target_median_height=cfg.target_median_height,
    )


@dataclass
class Sample:
    grid: CharGrid
    geom: GridGeometry
    target: TargetFields


def prepare(
    form: FormDocument,
    vocab: CharVocab,
    field_stride: int = 4,
    target_median_height: float = 3,
    radius: float = 1.0,
    aug: AugmentConfig | None = None,
) -> Sample:
    if aug is not None:
        form = augment(form, aug)
    grid = rasterize(form, vocab, target_median_height)
    geom = GridGeometry(grid.height, grid.width, grid.scale, field_stride)
    return Sample(grid, geom, encode_targets(form, geom, radius))


def batch_inputs(grids: Sequence[CharGrid], n_char: int) -> torch.Tensor:
    """One-hot input batch padded with background to the largest grid."""
    h = max(g.height for g in grids)
    w = max(g.width for g in grids)
    cells = np.zeros((len(grids), h, w), dtype=np.int64)
    for i, g in enumerate(grids):
        cells[i, : g.height, : g.width] = g.cells
    x = F.one_hot(torch.from_numpy(cells), n_char + 1).permute(0, 3, 1, 2)
    return x.to(torch.float32).contiguous()


def _pad_target(t: TargetFields, h: int, w: int, hf: int, wf: int) -> TargetFields:
    def pad(a, shape):
        out = np.zeros(a.shape[:-2] + shape, dtype=a.dtype)
        out[..., : a.shape[-2], : a.shape[-1]] = a
        return out

    p, q = t.pif, t.paf
    return TargetFields(
        pad(t.seg_mask, (h, w)),
        pad(t.key_mask, (h, w)),
        type(p)(pad(p.conf, (hf, wf)), pad(p.vec, (hf, wf)), pad(p.sigma, (hf, wf)), pad(p.mask, (hf, wf))),
        type(q)(pad(q.conf, (hf, wf)), pad(q.vec1, (hf, wf)), pad(q.vec2, (hf, wf)), pad(q.mask, (hf, wf))),
    )


def collate(samples: Sequence[Sample], n_char: int, field_stride: int):
    x = batch_inputs([s.grid for s in samples], n_char)
    h, w = x.shape[-2:]
    hf, wf = -(-h // field_stride), -(-w // field_stride)
    targets = [_pad_target(s.target, h, w, hf, wf) for s in samples]
    return x, collate_targets(targets)


def _sample_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: MSAUPAF
    vocab: CharVocab
    net_config: NetConfig
    history: list[dict[str, float]]
    out_dir: Path | None


def train(
    forms: Sequence[FormDocument],
    cfg: TrainConfig = TrainConfig(),
    net_cfg: NetConfig = NetConfig(),
    weights: LossWeights = LossWeights(),
    out_dir: str | Path | None = None,
    epoch_callback: Callable[[int, MSAUPAF, CharVocab], dict[str, float]] | None = None,
) -> TrainResult:
    """Train on ``forms``; checkpoints, vocabulary, config and log go to ``out_dir``.

    With ``epochs = 0`` only the initial checkpoint is written.
    """
    if not forms:
        raise ValueError("no training forms")
    torch.set_num_threads(cfg.threads)
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)

    vocab = build_vocab(forms, cfg.vocab_size)
    net_cfg = dataclasses.replace(net_cfg, n_input_channels=vocab.n_char + 1)
    model = MSAUPAF(net_cfg, seed=cfg.seed)
    opt = torch.optim.RMSprop(
        model.parameters(), lr=cfg.learning_rate, alpha=cfg.rms_alpha, eps=cfg.rms_eps
    )
    aug = augment_config(cfg, vocab)

    out = Path(out_dir) if out_dir is not None else None
    log_lines: list[str] = []

    def log(line: str) -> None:
        logger.info(line)
        log_lines.append(line)
        if out is not None:
            with open(out / LOG, "a") as fh:
                fh.write(line + "\n")

    def checkpoint() -> None:
        if out is None:
            return
        if not all(torch.isfinite(p).all() for p in model.parameters()):
            log("checkpoint skipped: non-finite parameters")
            return
        tmp = out / (CHECKPOINT + ".tmp")
        ad.save_checkpoint(dict(model.named_parameters()), tmp)
        tmp.replace(out / CHECKPOINT)

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / LOG).write_text("")
        (out / VOCAB).write_text(vocab.to_text(), encoding="utf-8")
        (out / CONFIG).write_text(dump_kv(net_cfg, cfg, weights))
    log(f"schedule {schedule_formula(cfg)}")
    checkpoint()

    fixed = None
    if aug is None:
        fixed = [
            prepare(f, vocab, net_cfg.field_stride, cfg.target_median_height, cfg.target_radius) for f in forms
        ]

    history = []
    n = len(forms)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums: dict[str, float] = {}
        n_batches = 0
        model.train()
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if fixed is not None:
                samples = [fixed[i] for i in idx]
            else:
                samples = [
                    prepare(
                        forms[i], vocab, net_cfg.field_stride, cfg.target_median_height,
                        cfg.target_radius, aug.with_seed(_sample_seed(cfg.seed, epoch, int(i))),
                    )
                    for i in idx
                ]
            x, target = collate(samples, vocab.n_char, net_cfg.field_stride)
            pred = model(x)
            try:
                loss, parts = total_loss(pred, target, weights)
            except LossError as exc:
                log(f"abort epoch={epoch + 1} reason={exc}")
                raise TrainingAborted(str(exc)) from exc
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        rec = {k: v / n_batches for k, v in sums.items()}
        rec.update(epoch=epoch + 1, lr=lr)
        if epoch_callback is not None:
            rec.update(epoch_callback(epoch + 1, model, vocab))
        history.append(rec)
        fields = " ".join(f"{k}={v:.6f}" for k, v in rec.items() if k not in ("epoch", "lr"))
        log(f"epoch={epoch + 1} lr={lr:.8f} {fields}")
        logger.debug("epoch %d took %.1fs", epoch + 1, time.perf_counter() - t0)
        if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
            checkpoint()
    return TrainResult(model, vocab, net_cfg, history, out)


def load_model(run_dir: str | Path, net_cfg: NetConfig | None = None) -> tuple[MSAUPAF, CharVocab, NetConfig]:
    from .config import apply_kv, read_kv

    run_dir = Path(run_dir)
    ckpt = run_dir / CHECKPOINT
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt}")
    vocab = CharVocab.from_text((run_dir / VOCAB).read_text(encoding="utf-8"))
    if net_cfg is None:
        net_cfg = NetConfig()
        if (run_dir / CONFIG).exists():
            net_cfg = apply_kv(net_cfg, read_kv(run_dir / CONFIG))
    net_cfg = dataclasses.replace(net_cfg, n_input_channels=vocab.n_char + 1)
    model = MSAUPAF(net_cfg)
    load_params(model, ad.load_checkpoint(ckpt))
    return model, vocab, net_cfg


@torch.no_grad()
def predict(
    model: MSAUPAF,
    vocab: CharVocab,
    forms: Sequence[FormDocument],
    decode_cfg: DecodeConfig = DecodeConfig(),
) -> list[DecodedForm]:
    model.eval()
    stride = model.cfg.field_stride
    out = []
    for form in forms:
        grid = rasterize(form, vocab, decode_cfg.target_median_height)
        geom = GridGeometry(grid.height, grid.width, grid.scale, stride)
        fields = model(batch_inputs([grid], vocab.n_char)).sample(0)
        out.append(decode(fields, geom, decode_cfg))
    return out

