"""Training loop, evaluation and checkpoint round-trips."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, TrainConfig
from .data import BatchSampler, Corpus
from .model import Model, build_model, lm_loss
from .optim import AdamState, adam_step, lr_at
from .tensor import no_grad

log = logging.getLogger(__name__)

METRIC_FIELDS = ["step", "loss", "smoothed_loss", "lr", "tokens_per_s"]
CHECKPOINT_NAME = "checkpoint.ckpt"
METRICS_NAME = "metrics.csv"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: Model
    log: list[dict] = field(default_factory=list)
    heldout_loss: float = float("nan")
    heldout_ppl: float = float("nan")
    run_dir: Path | None = None

    @property
    def final_smoothed_loss(self) -> float:
        return self.log[-1]["smoothed_loss"]


def evaluate_loss(model: Model, windows: np.ndarray, batch_size: int = 8,
                  max_batches: int | None = None) -> float:
    """Token-weighted mean cross-entropy over ``windows`` in their stored order."""
    total, count = 0.0, 0
    with no_grad():
        for b, start in enumerate(range(0, len(windows), batch_size)):
            if max_batches is not None and b >= max_batches:
                break
            batch = windows[start:start + batch_size]
            n = batch.shape[0] * (batch.shape[1] - 1)
            total += lm_loss(model, batch).item() * n
            count += n
    return total / count


def evaluate(model: Model, windows: np.ndarray, batch_size: int = 8,
             max_batches: int | None = None) -> float:
    """Perplexity, exp(mean loss), on held-out windows."""
    return math.exp(evaluate_loss(model, windows, batch_size, max_batches))


def _checkpoint_arrays(model: Model, adam: AdamState) -> dict[str, np.ndarray]:
    arrays = {f"param.{n}": p.data for n, p in model.named_parameters().items()}
    for n in adam.m:
        arrays[f"adam.m.{n}"] = adam.m[n]
        arrays[f"adam.v.{n}"] = adam.v[n]
    for i, st in enumerate(model.routing_states()):
        if st.centroids is not None:
            arrays[f"routing.{i}.centroids"] = st.centroids
    return arrays


def save_training_state(path: Path, model: Model, adam: AdamState, train_cfg: TrainConfig,
                        step: int, extra: dict, provenance: dict | None = None) -> None:
    header = {"config": model.config.to_dict(), "train": train_cfg.to_dict(), "step": step,
              "seed": train_cfg.seed, "precision": str(model.dtype), "extra": extra,
              "provenance": provenance or {}}
    save_checkpoint(path, _checkpoint_arrays(model, adam), header)


def load_model(path: str | Path) -> tuple[Model, dict, AdamState, dict]:
    """Rebuild the model saved in a checkpoint; returns (model, header, adam state, arrays)."""
    arrays, header = load_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    model = build_model(cfg, header.get("seed", 0), header.get("precision", "float64"))
    for name, p in model.named_parameters().items():
        p.data = arrays[f"param.{name}"].astype(model.dtype).copy()
    for i, st in enumerate(model.routing_states()):
        key = f"routing.{i}.centroids"
        if key in arrays:
            st.centroids = arrays[key].copy()
    adam = AdamState()
    for key, arr in arrays.items():
        if key.startswith("adam.m."):
            adam.m[key[7:]] = arr.copy()
        elif key.startswith("adam.v."):
            adam.v[key[7:]] = arr.copy()
    return model, header, adam, arrays


def provenance_line(provenance: dict | None) -> str:
    """``# key=value ...`` comment placed above CSV headers."""
    return "# " + " ".join(f"{k}={v}" for k, v in sorted((provenance or {}).items())) + "\n"


def _write_metrics(path: Path, rows: list[dict], provenance: dict | None = None) -> None:
    with open(path, "w", newline="") as f:
        if provenance:
            f.write(provenance_line(provenance))
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        lines = (line for line in f if not line.startswith("#"))
        return [{"step": int(r["step"]), **{k: float(r[k]) for k in METRIC_FIELDS[1:]}}
                for r in csv.DictReader(lines)]


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, corpus: Corpus | str | Path,
          out_dir: str | Path | None = None, resume: bool = False,
          provenance: dict | None = None) -> TrainResult:
    """Train ``model_cfg`` on ``corpus`` for ``train_cfg.steps`` steps.

    With ``out_dir`` the per-step metrics CSV and a rolling checkpoint are
    written there; ``resume=True`` continues from that checkpoint.
    ``provenance`` (e.g. spec hash and seed) is embedded in both.
    """
    train_cfg = train_cfg.validate()
    if not isinstance(corpus, Corpus):
        corpus = Corpus.load(corpus, model_cfg.seq_len)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    model = build_model(model_cfg, train_cfg.seed, train_cfg.precision)
    adam = AdamState()
    sampler = BatchSampler(corpus.train, train_cfg.batch_size, train_cfg.seed + 1)
    rows: list[dict] = []
    start = 0
    smoothed = None
    if resume and out is not None and (out / CHECKPOINT_NAME).exists():
        model, header, adam, _ = load_model(out / CHECKPOINT_NAME)
        start = header["step"]
        sampler.restore(header["extra"]["sampler"])
        smoothed = header["extra"]["smoothed"]
        if (out / METRICS_NAME).exists():
            rows = [r for r in read_metrics(out / METRICS_NAME) if r["step"] <= start]
        log.info("resumed from step %d", start)

    params = model.named_parameters()
    T = model_cfg.seq_len
    for step in range(start + 1, train_cfg.steps + 1):
        t0 = time.perf_counter()
        batch = sampler.next()
        model.zero_grad()
        loss = lm_loss(model, batch, training=True)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at step {step}")
        loss.backward()
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
        adam_step(params, grads, adam, step, train_cfg)
        s = train_cfg.smoothing
        smoothed = value if smoothed is None else s * smoothed + (1.0 - s) * value
        dt = time.perf_counter() - t0
        rows.append({"step": step, "loss": value, "smoothed_loss": smoothed,
                     "lr": lr_at(step, train_cfg), "tokens_per_s": batch.shape[0] * T / dt})
        if step % 100 == 0:
            log.info("step %d loss %.4f smoothed %.4f", step, value, smoothed)
        if out is not None and (step % train_cfg.checkpoint_every == 0 or step == train_cfg.steps):
            save_training_state(out / CHECKPOINT_NAME, model, adam, train_cfg, step,
                                {"sampler": sampler.state(), "smoothed": smoothed}, provenance)
            _write_metrics(out / METRICS_NAME, rows, provenance)

    heldout = evaluate_loss(model, corpus.heldout, train_cfg.batch_size, train_cfg.eval_batches)
    return TrainResult(model, rows, heldout, math.exp(heldout), out)
