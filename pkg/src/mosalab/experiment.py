"""Experiment specs, run directories with provenance, and the sparsity sweep.

Spec JSON::

    {
      "name": "nano-dense",                 # optional, used in run directory names
      "model": "nano" | {model config},     # preset name or inline config
      "train": {"preset": "nano", "steps": 2000, ...},
      "corpus": "corpus.txt",               # relative to the spec file
      "output_dir": "runs",                 # optional; else $MOSALAB_OUT, else ./runs
      "tags": ["baseline"],
      "sweep": {"dense_heads": 4, "kind": "mosa"}
    }
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .config import FULL_TRAIN, NANO_TRAIN, PRESETS, ConfigError, ModelConfig, TrainConfig
from .flops import flop_model, param_count, solve_iso_heads
from .train import TrainResult, provenance_line, train

OUTPUT_ENV = "MOSALAB_OUT"
TRAIN_PRESETS = {"nano": NANO_TRAIN, "full": FULL_TRAIN}
SPEC_FIELDS = {"name", "model", "train", "corpus", "output_dir", "tags", "sweep"}
SWEEP_FIELDS = ["rho", "heads", "params", "final_ppl"]


@dataclass
class ExperimentSpec:
    model: ModelConfig
    train: TrainConfig
    corpus: Path
    output_dir: Path | None = None
    tags: list[str] = field(default_factory=list)
    name: str = "run"
    dense_heads: int = 4
    kind: str = "mosa"

    def to_dict(self) -> dict:
        return {"name": self.name, "model": self.model.to_dict(), "train": self.train.to_dict(),
                "corpus": str(self.corpus), "tags": list(self.tags),
                "sweep": {"dense_heads": self.dense_heads, "kind": self.kind}}

    def spec_hash(self) -> str:
        """Digest of the resolved spec; the output directory is deliberately left out."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"spec_hash": self.spec_hash(), "seed": self.train.seed}


def _train_config(raw) -> TrainConfig:
    if raw is None:
        return TrainConfig().validate()
    if not isinstance(raw, dict):
        raise ConfigError("train", "must be an object")
    raw = dict(raw)
    preset = raw.pop("preset", None)
    if preset is not None and preset not in TRAIN_PRESETS:
        raise ConfigError("train.preset", f"unknown preset {preset!r}; choose from {sorted(TRAIN_PRESETS)}")
    base = TRAIN_PRESETS[preset].to_dict() if preset else {}
    base.update(raw)
    return TrainConfig.from_dict(base)


def spec_from_dict(data: dict, base_dir: Path = Path(".")) -> ExperimentSpec:
    if not isinstance(data, dict):
        raise ConfigError("spec", "top level must be an object")
    unknown = set(data) - SPEC_FIELDS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    if "model" not in data:
        raise ConfigError("model", "missing required field")
    if "corpus" not in data:
        raise ConfigError("corpus", "missing required field")
    m = data["model"]
    if isinstance(m, str):
        if m not in PRESETS:
            raise ConfigError("model", f"unknown preset {m!r}; choose from {sorted(PRESETS)}")
        model = PRESETS[m]
    elif isinstance(m, dict):
        model = ModelConfig.from_dict(m)
    else:
        raise ConfigError("model", "must be a preset name or an object")
    sweep = data.get("sweep") or {}
    if set(sweep) - {"dense_heads", "kind"}:
        raise ConfigError(f"sweep.{sorted(set(sweep) - {'dense_heads', 'kind'})[0]}", "unknown field")
    corpus = Path(data["corpus"])
    if not corpus.is_absolute():
        corpus = (base_dir / corpus).resolve()
    out = data.get("output_dir")
    if out is not None:
        out = Path(out) if Path(out).is_absolute() else (base_dir / out).resolve()
    tags = data.get("tags", [])
    if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
        raise ConfigError("tags", "must be a list of strings")
    return ExperimentSpec(model, _train_config(data.get("train")), corpus, out, tags,
                          data.get("name", model.name), int(sweep.get("dense_heads", 4)),
                          sweep.get("kind", "mosa"))


def load_spec(path: str | Path) -> ExperimentSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("spec", f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}", exc.msg) from exc
    return spec_from_dict(data, path.parent)


def output_root(spec: ExperimentSpec) -> Path:
    if spec.output_dir is not None:
        return spec.output_dir
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def new_run_dir(root: Path, label: str) -> Path:
    """Create ``root/label-rNNN`` with the first free run id; never reuses a directory."""
    root.mkdir(parents=True, exist_ok=True)
    n = 1
    while True:
        candidate = root / f"{label}-r{n:03d}"
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            n += 1


def _write_json(path: Path, data: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def run_experiment(spec: ExperimentSpec, run_dir: Path | None = None, resume: bool = False) -> tuple[TrainResult, dict]:
    """Train one spec; writes spec.json, metrics.csv, checkpoint.ckpt and summary.json."""
    if run_dir is None:
        run_dir = new_run_dir(output_root(spec), f"{spec.name}-{spec.spec_hash()[:8]}")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    prov = spec.provenance()
    _write_json(run_dir / "spec.json", {**spec.to_dict(), **prov})
    result = train(spec.model, spec.train, spec.corpus, run_dir, resume=resume, provenance=prov)
    last = result.log[-1]
    summary = {
        **prov,
        "name": spec.name,
        "run_dir": str(run_dir),
        "tags": spec.tags,
        "model": spec.model.to_dict(),
        "params": param_count(spec.model),
        "flops_per_pass": flop_model(spec.model).total,
        "steps": last["step"],
        "final_loss": last["loss"],
        "final_smoothed_loss": last["smoothed_loss"],
        "heldout_loss": result.heldout_loss,
        "heldout_ppl": result.heldout_ppl,
    }
    _write_json(run_dir / "summary.json", summary)
    return result, summary


def sweep_configs(spec: ExperimentSpec, rhos: list[int]) -> list[tuple[int, ModelConfig, int]]:
    """(rho, config, sparse heads) per sparsity; rho 1 is the dense baseline."""
    out = []
    for rho in rhos:
        sol = solve_iso_heads(spec.model, rho, spec.dense_heads, spec.kind)
        out.append((rho, sol.config, sol.sparse_heads))
    return out


def run_sweep(spec: ExperimentSpec, rhos: list[int]) -> tuple[Path, list[dict]]:
    """Train one IsoFLOP-matched model per sparsity and write ``sweep.csv``."""
    plan = sweep_configs(spec, rhos)
    sweep_dir = new_run_dir(output_root(spec), f"{spec.name}-sweep-{spec.spec_hash()[:8]}")
    rows = []
    for rho, cfg, heads in plan:
        sub = replace(spec, model=cfg, name=f"{spec.name}-rho{rho}")
        _, summary = run_experiment(sub, sweep_dir / f"rho{rho}")
        rows.append({"rho": rho, "heads": heads, "params": summary["params"],
                     "final_ppl": summary["heldout_ppl"]})
    with open(sweep_dir / "sweep.csv", "w", newline="") as f:
        f.write(provenance_line(spec.provenance()))
        w = csv.DictWriter(f, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return sweep_dir, rows
