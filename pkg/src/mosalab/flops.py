"""FLOP, parameter and KV-cache accounting, and the IsoFLOP head-count solver.

A matrix product of shapes [i, j] x [j, k] is counted as 2*i*j*k FLOPs.
Layer norms, residual adds and embeddings are left out of FLOP totals but
their parameters are counted.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

from .config import HeadGroup, ModelConfig

G = 10**9


def flop_dense_head(T: int, h: int, hd: int) -> int:
    return 8 * h * hd * T + 4 * hd * T * T


def flop_mosa_head(T: int, h: int, hd: int, k: int) -> int:
    return 8 * h * hd * k + 4 * hd * k * k + 2 * h * T + hd * k


def flop_fixed_head(h: int, hd: int, k: int) -> int:
    return 8 * h * hd * k + 4 * hd * k * k


def flop_routing_head(T: int, h: int, hd: int, k: int, rho: int) -> int:
    return 6 * h * hd * T + 4 * hd * k * k * rho + 2 * hd * T


def flop_local_head(T: int, h: int, hd: int, window: int) -> int:
    return 8 * h * hd * T + 4 * hd * T * min(window, T)


def routing_overhead(T: int, h: int, hd: int, k: int) -> int:
    """Token scoring (2hT) plus scaling attended rows by their scores (h'k)."""
    return 2 * h * T + hd * k


def group_k(group: HeadGroup, T: int) -> int:
    if group.kind == "mosa":
        return max(T // group.rho, 1)
    if group.kind == "fixed":
        return len(range(0, T, group.rho))
    if group.kind == "routing":
        return T // group.rho
    if group.kind == "local":
        return min(group.window, T)
    return T


def head_terms(group: HeadGroup, T: int, h: int, hd: int) -> dict[str, int]:
    """Per-head FLOPs split into projection / attention / overhead terms."""
    k = group_k(group, T)
    if group.kind == "dense":
        return {"projection": 8 * h * hd * T, "attention": 4 * hd * T * T, "overhead": 0}
    if group.kind == "local":
        return {"projection": 8 * h * hd * T, "attention": 4 * hd * T * k, "overhead": 0}
    if group.kind == "fixed":
        return {"projection": 8 * h * hd * k, "attention": 4 * hd * k * k, "overhead": 0}
    if group.kind == "mosa":
        return {"projection": 8 * h * hd * k, "attention": 4 * hd * k * k,
                "overhead": routing_overhead(T, h, hd, k)}
    if group.kind == "routing":
        return {"projection": 6 * h * hd * T, "attention": 4 * hd * k * k * group.rho,
                "overhead": 2 * hd * T}
    raise ValueError(group.kind)


@dataclass
class FlopReport:
    model: str
    layers: int
    seq_len: int
    heads: list[dict] = field(default_factory=list)  # one entry per head group, per-layer values
    feedforward: int = 0
    total: int = 0

    @property
    def total_g(self) -> float:
        return self.total / G

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_g"] = round(self.total_g, 2)
        return d

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["component", "kind", "count", "projection", "attention", "overhead", "flops_all_layers"])
        for g in self.heads:
            w.writerow(["heads", g["kind"], g["count"], g["projection"], g["attention"], g["overhead"],
                        g["flops_all_layers"]])
        w.writerow(["feedforward", "", "", "", "", "", self.feedforward])
        w.writerow(["total", "", "", "", "", "", self.total])
        return buf.getvalue()


def flop_model(config: ModelConfig) -> FlopReport:
    """Forward-pass FLOPs of the whole model: layers x (heads + 16 h^2 T feedforward)."""
    l, h, hd, T = config.layers, config.hidden, config.head_dim, config.seq_len
    report = FlopReport(config.name, l, T)
    total = 0
    for g in config.heads:
        terms = head_terms(g, T, h, hd)
        per_head = sum(terms.values())
        all_layers = l * g.count * per_head
        report.heads.append({"kind": g.kind, "count": g.count, "rho": g.rho, "window": g.window,
                             "k": group_k(g, T), **terms, "per_head": per_head,
                             "flops_all_layers": all_layers})
        total += all_layers
    report.feedforward = l * 4 * config.ff_mult * h * h * T
    report.total = total + report.feedforward
    return report


class InfeasibleBudget(ValueError):
    pass


@dataclass
class IsoSolution:
    rho: int
    dense_heads: int
    sparse_heads: int
    achieved_flops: int
    baseline_flops: int
    kind: str = "mosa"
    config: ModelConfig | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["config"] = self.config.to_dict() if self.config else None
        d["achieved_g"] = round(self.achieved_flops / G, 2)
        d["baseline_g"] = round(self.baseline_flops / G, 2)
        return d


def hybrid_config(baseline: ModelConfig, rho: int, n_dense: int, n_sparse: int,
                  kind: str = "mosa") -> ModelConfig:
    groups = []
    if n_dense:
        groups.append(HeadGroup("dense", n_dense))
    if n_sparse:
        groups.append(HeadGroup(kind, n_sparse, rho=rho))
    name = f"{baseline.name}-{kind}{rho}-d{n_dense}"
    return baseline.with_heads(groups, name=name)


def solve_iso_heads(baseline: ModelConfig, rho: int, n_dense: int, kind: str = "mosa") -> IsoSolution:
    """Largest sparse head count whose hybrid model stays within the baseline's FLOPs.

    The hybrid keeps ``n_dense`` dense heads per layer. ``rho == 1`` returns
    the baseline itself.
    """
    H = baseline.head_count("dense")
    if any(g.kind != "dense" for g in baseline.heads):
        raise ValueError("IsoFLOP baseline must contain dense heads only")
    if not 0 <= n_dense <= H:
        raise InfeasibleBudget(f"n_dense={n_dense} exceeds the baseline's {H} dense heads")
    if rho < 1:
        raise ValueError("rho must be >= 1")
    budget = flop_model(baseline).total
    if rho == 1:
        return IsoSolution(1, H, 0, budget, budget, kind, baseline)
    base = flop_model(hybrid_config(baseline, rho, n_dense, 0, kind)).total
    if base > budget:
        raise InfeasibleBudget("dense part alone exceeds the baseline budget")
    T, h, hd = baseline.seq_len, baseline.hidden, baseline.head_dim
    per_head = baseline.layers * sum(head_terms(HeadGroup(kind, 1, rho=rho), T, h, hd).values())
    n = (budget - base) // per_head if per_head else 0
    cfg = hybrid_config(baseline, rho, n_dense, n, kind)
    achieved = flop_model(cfg).total
    assert achieved <= budget < achieved + per_head
    return IsoSolution(rho, n_dense, n, achieved, budget, kind, cfg)


def head_params(kind: str, h: int, hd: int) -> int:
    if kind == "mosa":
        return 4 * h * hd + h
    if kind == "routing":
        return 3 * h * hd
    return 4 * h * hd


def param_count(config: ModelConfig) -> int:
    """Trainable parameters: embeddings, heads, bias-free feedforward, layer norms."""
    h, hd = config.hidden, config.head_dim
    embed = config.vocab * h * (1 if config.tie_embeddings else 2)
    heads = sum(g.count * head_params(g.kind, h, hd) for g in config.heads)
    ff = 2 * h * config.ff_mult * h
    norms = 2 * 2 * h
    return embed + config.layers * (heads + ff + norms) + 2 * h


def kv_total(T: int, h_dense: int, k: int | None, h_mosa: int) -> int:
    """Key-value pairs a cache holds: every token for dense heads, k per MoSA head."""
    if h_mosa and k is None:
        raise ValueError("k is required when there are MoSA heads")
    return T * h_dense + (k or 0) * h_mosa


@dataclass
class KvReport:
    model: str
    per_layer: int
    items: list[dict]


def kv_report(config: ModelConfig) -> KvReport:
    """Per-layer KV totals by head group (same accounting generalised to other kinds)."""
    T = config.seq_len
    items, total = [], 0
    for g in config.heads:
        per_head = T if g.kind in ("dense", "routing") else group_k(g, T)
        items.append({"kind": g.kind, "count": g.count, "kv_per_head": per_head, "kv": per_head * g.count})
        total += per_head * g.count
    return KvReport(config.name, total, items)
