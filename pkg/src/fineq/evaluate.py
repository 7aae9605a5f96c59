"""Error metrics and the evaluation report shared by the CLI commands."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .baselines import rtn_quantize, uniform_quantize
from .errors import InvariantError, ValidationError
from .quant import (
    QuantConfig,
    average_bits,
    average_bits_total,
    dequantize_matrix,
    protected_mask,
    quantize_matrix,
    scheme_histogram,
)
from .tensor_io import FloatTensor

METHODS = ("fineq", "uniform", "rtn")


def error_metrics(ref: FloatTensor, approx: FloatTensor) -> dict:
    diff = approx.data.astype(np.float64) - ref.data.astype(np.float64)
    return {"mse": float(np.mean(diff * diff)), "max_abs_err": float(np.abs(diff).max())}


def protected_error_ratio(ref: FloatTensor, q) -> float:
    """Worst ``|dequant - w| / (s3 / 2)`` over weights kept at 3 bits (0 if none)."""
    deq = q.channel_values().astype(np.float64) * q.scales.astype(np.float64)[:, None]
    w = ref.channels().astype(np.float64)
    mask = protected_mask(q)
    mask = mask if q.channel_axis == "row" else mask.T
    half = q.scales.astype(np.float64)[:, None] / 2
    err = np.abs(deq - w)
    ratio = np.divide(err, half, out=np.zeros_like(err), where=mask & (half > 0))
    return float(ratio.max(initial=0.0))


@dataclass
class EvalReport:
    methods: dict = field(default_factory=dict)
    sim: Optional[dict] = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"config": self.config, "methods": self.methods}
        if self.sim is not None:
            d["sim"] = self.sim
        return d

    def to_json(self) -> str:
        doc = self.to_dict()
        _check_finite(doc)
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        head = f"{'method':<12}{'mse':>14}{'max_abs_err':>14}{'bits':>9}{'bits_total':>12}"
        lines = [head, "-" * len(head)]
        for name, m in self.methods.items():
            lines.append(
                f"{name:<12}{m['mse']:>14.6e}{m['max_abs_err']:>14.6e}"
                f"{m['avg_bits_payload']:>9.4f}{m['avg_bits_total']:>12.4f}"
            )
        if self.sim is not None:
            s = self.sim["stats"]
            lines.append("")
            lines.append(
                f"sim: cycles={s['total_cycles']} matmul={s['stage_cycles']['matmul']} "
                f"selector={s['selector_activations']} energy_proxy={s['energy_proxy']:.6g}"
            )
        return "\n".join(lines)


def _check_finite(obj):
    if isinstance(obj, dict):
        for v in obj.values():
            _check_finite(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            _check_finite(v)
    elif isinstance(obj, float) and not np.isfinite(obj):
        raise InvariantError("report contains a non-finite number")


def evaluate(
    t: FloatTensor,
    methods: Sequence[str] = METHODS,
    bits: Sequence[int] = (2,),
    cfg: Optional[QuantConfig] = None,
) -> EvalReport:
    cfg = cfg or QuantConfig()
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValidationError(f"unknown methods: {sorted(unknown)}")
    report = EvalReport(
        config={
            "rows": t.rows,
            "cols": t.cols,
            "channel_axis": cfg.channel_axis or t.channel_axis,
            "harmonize": cfg.harmonize,
            "methods": list(methods),
            "bits": [int(b) for b in bits],
        }
    )
    n_w = t.rows * t.cols
    n_ch = t.rows if (cfg.channel_axis or t.channel_axis) == "row" else t.cols
    for method in methods:
        if method == "fineq":
            q = quantize_matrix(t, cfg)
            entry = error_metrics(t, dequantize_matrix(q))
            entry["avg_bits_payload"] = average_bits(q, warn=False)
            entry["avg_bits_total"] = average_bits_total(q)
            entry["scheme_histogram"] = scheme_histogram(q)
            entry["protected_err_over_half_scale"] = protected_error_ratio(t, q)
            report.methods["fineq"] = entry
            continue
        for b in bits:
            if method == "uniform":
                res = uniform_quantize(t, b)
                overhead = 32 * n_ch  # one f32 scale per channel
            else:
                res = rtn_quantize(t, b)
                overhead = 64 * n_ch  # f32 scale + 32-bit zero-point per row
            entry = error_metrics(t, res.dequantized)
            entry["avg_bits_payload"] = float(b)
            entry["avg_bits_total"] = b + overhead / n_w
            report.methods[f"{method}-{b}"] = entry
    return report
