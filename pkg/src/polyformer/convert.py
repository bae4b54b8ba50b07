"""Stage three: replace non-polynomial sites with fitted polynomials.

Planning pairs every non-polynomial site with a polynomial fitted over
its recorded input range widened by a safety margin (test inputs
overshoot training statistics). Conversion clones the model, swaps
activations for their polynomials, folds every BatchNorm into a constant
affine, and rewires LayerNorm around a composite reciprocal-square-root.
The converted model's forward traces to a PolyGraph that passes the
arithmetic whitelist.

Softmax-attention models are rejected: softmax is replaced during the
architecture stage, never approximated here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ArchitectureError, ConfigError, DomainError
from .model import MaskSpec, TransformerModel, cross_entropy, perplexity
from .polygraph import PolyGraph, trace_forward
from .polynomials import CompositePolynomial, CompositeStage, Polynomial, poly_from_json
from .rangemin import RangeRecord, VarianceRecord
from .remez import compose_relu_approx, fit_inverse_sqrt, remez_fit


def _gelu_np(x):
    from scipy import special

    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + special.erf(x / math.sqrt(2.0)))


@dataclass
class DegreeConfig:
    """Polynomial sizes used at conversion time (all configurable)."""

    gelu_degree: int = 15
    relu_sign_degrees: tuple[int, ...] = (7, 7, 7)
    relu_delta: float = 0.02
    invsqrt_seed_degree: int = 7
    invsqrt_newton_steps: int = 2

    def to_dict(self) -> dict:
        d = vars(self).copy()
        d["relu_sign_degrees"] = list(self.relu_sign_degrees)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "DegreeConfig":
        obj = dict(obj)
        if "relu_sign_degrees" in obj:
            obj["relu_sign_degrees"] = tuple(obj["relu_sign_degrees"])
        return cls(**obj)


@dataclass
class PlanEntry:
    site: str
    target: str  # "relu" | "gelu" | "squared_relu" | "inv_sqrt"
    recorded: tuple[float, float]
    domain: tuple[float, float]
    poly: Polynomial | CompositePolynomial

    def to_json(self) -> dict:
        return {
            "site": self.site, "target": self.target,
            "recorded": list(self.recorded), "domain": list(self.domain),
            "poly": self.poly.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PlanEntry":
        return cls(obj["site"], obj["target"], tuple(obj["recorded"]),
                   tuple(obj["domain"]), poly_from_json(obj["poly"]))


@dataclass
class ConversionPlan:
    entries: dict[str, PlanEntry]
    margin: float
    degrees: DegreeConfig = field(default_factory=DegreeConfig)

    def to_json(self) -> dict:
        return {
            "margin": self.margin,
            "degrees": self.degrees.to_dict(),
            "entries": [e.to_json() for e in self.entries.values()],
        }

    @classmethod
    def from_json(cls, obj: dict | str) -> "ConversionPlan":
        if isinstance(obj, str):
            obj = json.loads(obj)
        entries = {e["site"]: PlanEntry.from_json(e) for e in obj["entries"]}
        return cls(entries, obj["margin"], DegreeConfig.from_dict(obj["degrees"]))

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


EPS_SHIFT = 1e-5  # added to variances before the reciprocal square root


def _widened(lo: float, hi: float, margin: float) -> tuple[float, float]:
    span = max(hi - lo, 1e-6)
    return lo - margin * span, hi + margin * span


def _fit_activation(target: str, domain: tuple[float, float], degrees: DegreeConfig):
    if target == "gelu":
        return remez_fit(_gelu_np, domain, degrees.gelu_degree).poly
    bound = max(abs(domain[0]), abs(domain[1]))
    comp = compose_relu_approx(degrees.relu_sign_degrees, (-bound, bound),
                               delta=degrees.relu_delta)
    if target == "relu":
        return comp
    if target == "squared_relu":
        square = Polynomial([0.0, 0.0, 1.0], (-bound * 1.5, bound * 1.5))
        return CompositePolynomial(
            stages=comp.stages + [CompositeStage("poly", square)],
            domain=(-bound, bound),
        )
    raise ConfigError(f"no polynomial recipe for activation {target!r}")


def plan_conversion(model: TransformerModel,
                    ranges: dict[str, RangeRecord],
                    variances: dict[str, VarianceRecord],
                    margin: float = 0.1,
                    degrees: DegreeConfig | None = None) -> ConversionPlan:
    """One plan entry per non-polynomial site of the model.

    Activation domains are the recorded ranges widened by margin * span;
    variance domains additionally receive the epsilon shift and a
    positive lower bound. Missing records raise DomainError.
    """
    if margin < 0:
        raise ConfigError("margin must be >= 0")
    degrees = degrees or DegreeConfig()
    entries: dict[str, PlanEntry] = {}

    def activation_entry(site: str, target: str):
        if site not in ranges:
            raise DomainError(math.nan, (math.nan, math.nan), site=f"missing range for {site}")
        rec = ranges[site]
        dom = _widened(rec.min_value, rec.max_value, margin)
        entries[site] = PlanEntry(site, target, (rec.min_value, rec.max_value), dom,
                                  _fit_activation(target, dom, degrees))

    for i, block in enumerate(model.blocks):
        if block.attn.cfg.kind == "sigma" and block.attn.cfg.sigma_activation != "poly":
            activation_entry(f"block{i}.attn.act", block.attn.cfg.sigma_activation)
        if block.mlp_poly is None:
            activation_entry(f"block{i}.mlp.act", model.cfg.mlp_activation)

    if model.cfg.norm.kind == "layernorm":
        for layer in model.norm_layers():
            if layer.kind != "layernorm":
                continue
            site = f"{layer.name}.var"
            if site not in variances:
                raise DomainError(math.nan, (math.nan, math.nan),
                                  site=f"missing variance record for {site}")
            rec = variances[site]
            lo, hi = _widened(rec.var_min, rec.var_max, margin)
            lo = max(lo, 0.0) + EPS_SHIFT
            hi = hi + EPS_SHIFT
            if lo <= 0:
                raise DomainError(lo, (0.0, math.inf), site=site)
            poly = fit_inverse_sqrt((lo, hi), degrees.invsqrt_seed_degree,
                                    degrees.invsqrt_newton_steps)
            entries[site] = PlanEntry(site, "inv_sqrt", (rec.var_min, rec.var_max),
                                      (lo, hi), poly)
    return ConversionPlan(entries, margin, degrees)


def convert(model: TransformerModel, plan: ConversionPlan) -> TransformerModel:
    """Clone the model and substitute every non-polynomial site.

    The result evaluates with additions and multiplications only: poly
    activations, composite LayerNorm, frozen-affine BatchNorms.
    """
    if model.cfg.attention.kind == "softmax":
        raise ArchitectureError(
            "softmax attention cannot be polynomialized; use a sigma-attention model"
        )
    poly_model = _clone(model)

    for i, block in enumerate(poly_model.blocks):
        attn = block.attn
        if attn.cfg.sigma_activation != "poly":
            site = f"block{i}.attn.act"
            if site in plan.entries:
                attn.sigma_poly = plan.entries[site].poly
                attn.cfg = replace(attn.cfg, sigma_activation="poly")
        if block.mlp_poly is None:
            site = f"block{i}.mlp.act"
            if site in plan.entries:
                block.mlp_poly = plan.entries[site].poly
        if attn.head_norm is not None and not attn.head_norm.frozen:
            attn.head_norm.freeze_affine()
        if block.mlp_bn is not None and block.mlp_bn.kind == "batchnorm":
            block.mlp_bn.freeze_affine()

    for layer in poly_model.norm_layers():
        if layer.kind == "layernorm":
            site = f"{layer.name}.var"
            if site not in plan.entries:
                raise DomainError(math.nan, (math.nan, math.nan),
                                  site=f"plan does not cover {site}")
            layer.inv_sqrt_poly = plan.entries[site].poly
            layer.kind = "poly_layernorm"
        elif layer.kind == "batchnorm":
            layer.freeze_affine()

    poly_model.poly_domain_mode = "clamp"
    poly_model.oob_counter = {}
    return poly_model


def _clone(model: TransformerModel) -> TransformerModel:
    clone = TransformerModel(model.cfg)
    for (name_a, pa), (name_b, pb) in zip(model.parameters(), clone.parameters()):
        assert name_a == name_b
        pb.data = pa.data.copy()
    for src, dst in zip(model.norm_layers(), clone.norm_layers()):
        dst.running_mean = src.running_mean.copy()
        dst.running_var = src.running_var.copy()
        dst.stats_initialized = src.stats_initialized
        dst.kind = src.kind
        if src.frozen_scale is not None:
            dst.frozen_scale = src.frozen_scale.copy()
            dst.frozen_shift = src.frozen_shift.copy()
        dst.inv_sqrt_poly = src.inv_sqrt_poly
    for bsrc, bdst in zip(model.blocks, clone.blocks):
        bdst.mlp_poly = bsrc.mlp_poly
        bdst.attn.sigma_poly = bsrc.attn.sigma_poly
        bdst.attn.cfg = bsrc.attn.cfg
        hs, hd = bsrc.attn.head_norm, bdst.attn.head_norm
        if hs is not None:
            hd.running_mean = hs.running_mean.copy()
            hd.running_var = hs.running_var.copy()
            hd.stats_initialized = hs.stats_initialized
            hd.frozen = hs.frozen
            if hs.frozen_scale is not None:
                hd.frozen_scale = hs.frozen_scale.copy()
                hd.frozen_shift = hs.frozen_shift.copy()
    return clone


def trace_model(model: TransformerModel, sample_input: np.ndarray) -> PolyGraph:
    """Trace one forward pass into its arithmetic graph.

    For LM models the graph input is the embedded token sequence (the
    plaintext-side lookup is the data owner's); for vision models it is
    the raw pixel grid.
    """
    if model.cfg.task == "lm":
        def fn():
            return model.lm_logits(sample_input, mode="eval")
    else:
        def fn():
            return model.image_logits(sample_input, mode="eval")
    graph, _ = trace_forward(fn)
    return graph


def graph_inputs_for(model: TransformerModel, inputs: np.ndarray) -> dict[str, np.ndarray]:
    """Plaintext-side preprocessing that yields the graph's input feed."""
    if model.cfg.task == "lm":
        return {"tokens_embedded": model.token_table.data[np.asarray(inputs)]}
    return {"image_pixels": np.asarray(inputs, dtype=np.float64)}


def fidelity_report(original: TransformerModel, poly_model: TransformerModel,
                    dataset, batches: int = 4, batch_size: int = 16) -> dict:
    """Paired per-example evaluation of the frozen model pair.

    Reports output deviation statistics, task metrics and their delta,
    prediction agreement (next-token or classification), out-of-range hit
    counts per site, and the same statistics restricted to fully in-range
    examples.
    """
    task = original.cfg.task
    max_dev = 0.0
    dev_sum = 0.0
    dev_count = 0
    agree = total = 0
    agree_in = total_in = 0
    losses_orig: list[float] = []
    losses_poly: list[float] = []
    correct_orig = correct_poly = label_total = 0
    oob_totals: dict[str, int] = {}
    examples = 0

    for x, y in dataset.test_batches(batch_size, limit=batches):
        for i in range(len(x)):
            xi, yi = x[i: i + 1], y[i: i + 1]
            poly_model.oob_counter = {}
            if task == "lm":
                lo = original.lm_logits(xi, mode="eval")
                lp = poly_model.lm_logits(xi, mode="eval")
                losses_orig.append(cross_entropy(lo, yi, original.cfg.vocab).item())
                losses_poly.append(cross_entropy(lp, yi, original.cfg.vocab).item())
                po, pp = np.argmax(lo.data, -1), np.argmax(lp.data, -1)
                agree += int((po == pp).sum())
                total += po.size
                hits = sum(poly_model.oob_counter.values())
                if hits == 0:
                    agree_in += int((po == pp).sum())
                    total_in += po.size
            else:
                lo = original.image_logits(xi, mode="eval")
                lp = poly_model.image_logits(xi, mode="eval")
                po, pp = int(np.argmax(lo.data)), int(np.argmax(lp.data))
                correct_orig += int(po == yi[0])
                correct_poly += int(pp == yi[0])
                label_total += 1
                agree += int(po == pp)
                total += 1
                hits = sum(poly_model.oob_counter.values())
                if hits == 0:
                    agree_in += int(po == pp)
                    total_in += 1
            for site, n in poly_model.oob_counter.items():
                oob_totals[site] = oob_totals.get(site, 0) + n
            dev = np.abs(lp.data - lo.data)
            max_dev = max(max_dev, float(dev.max()))
            dev_sum += float(dev.sum())
            dev_count += dev.size
            examples += 1

    if examples == 0:
        raise ConfigError("fidelity evaluation needs a non-empty dataset")

    if task == "lm":
        metric_orig = perplexity(float(np.mean(losses_orig)))
        metric_poly = perplexity(float(np.mean(losses_poly)))
        metric_name = "perplexity"
        poly_not_better = metric_poly >= metric_orig
    else:
        metric_orig = correct_orig / label_total
        metric_poly = correct_poly / label_total
        metric_name = "accuracy"
        poly_not_better = metric_poly <= metric_orig

    return {
        "examples": examples,
        "max_output_deviation": max_dev,
        "mean_output_deviation": dev_sum / dev_count,
        "metric_name": metric_name,
        "metric_original": metric_orig,
        "metric_poly": metric_poly,
        "metric_delta": metric_poly - metric_orig,
        "poly_not_better_than_original": bool(poly_not_better),
        "agreement": agree / total,
        "agreement_in_range": (agree_in / total_in) if total_in else None,
        "in_range_fraction": total_in / total,
        "out_of_range_hits": oob_totals,
    }
