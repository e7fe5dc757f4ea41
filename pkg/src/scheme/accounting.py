"""Exact parameter and multiply-accumulate (MAC) counts for channel mixers.

Counting convention: MACs cover the weight matrix products only.  Bias adds,
activations, softmax and normalization are not counted.  A channel
covariance attention branch, when counted, costs ``N*d*d`` MACs for
``x x^T`` plus ``d*d*N`` for re-weighting ``x``.  FLOPs are reported as
``2 * MACs``.
"""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

from .errors import ConfigError
from .mixers import MixerConfig, as_fraction, format_fraction

PLAN_COLUMNS = ("cfg_name", "d", "E", "g1", "g2", "params", "macs_per_token", "effective_expansion")


@dataclass(frozen=True)
class CostReport:
    params: int
    macs_per_token: int
    macs_total: int
    effective_expansion: Fraction
    includes_cca: bool
    tokens: int = 1

    @property
    def flops_total(self) -> int:
        return 2 * self.macs_total


def weight_params(cfg: MixerConfig) -> int:
    cfg.validate()
    width = cfg.E * cfg.d * cfg.d
    return int(width / cfg.g1 + width / cfg.g2)


def mixer_params(cfg: MixerConfig) -> int:
    """Weights plus biases of both layers: ``E d^2/g1 + E d + E d^2/g2 + d``."""
    return weight_params(cfg) + cfg.hidden + cfg.d


def cca_macs(d: int, n_tokens: int) -> int:
    return 2 * n_tokens * d * d


def mixer_macs(cfg: MixerConfig, n_tokens: int, include_cca: bool = False) -> int:
    if n_tokens < 1:
        raise ConfigError(f"token count must be >= 1, got {n_tokens}")
    macs = n_tokens * weight_params(cfg)
    if include_cca:
        macs += cca_macs(cfg.d, n_tokens)
    return macs


def effective_expansion(E, g1: int, g2: int) -> Fraction:
    """``2 g1 g2 E / (g1 + g2)``: the grouped expansion that costs the same as a dense expansion ``E``."""
    if g1 < 1 or g2 < 1:
        raise ConfigError(f"group counts must be >= 1, got g1={g1}, g2={g2}")
    return Fraction(2 * g1 * g2, g1 + g2) * as_fraction(E)


def cost_report(cfg: MixerConfig, n_tokens: int = 1, include_cca: bool | None = None) -> CostReport:
    """Cost of one mixer over ``n_tokens`` tokens.

    ``include_cca`` defaults to whether a fusion branch would actually run,
    i.e. ``cfg.mode == "train"``.  Callers pass ``False`` for mixers without
    the branch.
    """
    if include_cca is None:
        include_cca = cfg.mode == "train"
    per_token = mixer_macs(cfg, 1)
    return CostReport(
        params=mixer_params(cfg),
        macs_per_token=per_token,
        macs_total=mixer_macs(cfg, n_tokens, include_cca),
        effective_expansion=effective_expansion(cfg.E, cfg.g1, cfg.g2),
        includes_cca=include_cca,
        tokens=n_tokens,
    )


def iso_flop_plan(
    d: int,
    mac_budget_per_token: int,
    expansions: Iterable,
    groups: Sequence[int],
    rel_tol: float = 0.01,
    groups2: Sequence[int] | None = None,
) -> list[tuple[MixerConfig, CostReport]]:
    """All valid ``(E, g1, g2)`` whose per-token weight MACs are within ``rel_tol`` of the budget.

    Sorted by effective expansion (descending), then parameter count, then ``(g1, g2)``.
    """
    expansions = [as_fraction(e) for e in expansions]
    groups = list(groups)
    if not expansions or not groups:
        raise ConfigError("planner grid must be nonempty")
    if mac_budget_per_token <= 0:
        return []
    second = list(groups2) if groups2 is not None else groups
    found = []
    for E, g1, g2 in itertools.product(expansions, groups, second):
        cfg = MixerConfig(d=d, E=E, g1=g1, g2=g2, mode="inference")
        try:
            cfg.validate()
        except ConfigError:
            continue
        macs = mixer_macs(cfg, 1)
        if abs(macs - mac_budget_per_token) <= rel_tol * mac_budget_per_token:
            found.append((cfg, cost_report(cfg, 1, include_cca=False)))
    found.sort(key=lambda item: (-item[1].effective_expansion, item[1].params, item[0].g1, item[0].g2))
    return found


def plan_csv(plan: list[tuple[MixerConfig, CostReport]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PLAN_COLUMNS)
    for cfg, report in plan:
        writer.writerow(
            [
                cfg.name,
                cfg.d,
                format_fraction(cfg.E),
                cfg.g1,
                cfg.g2,
                report.params,
                report.macs_per_token,
                format_fraction(report.effective_expansion),
            ]
        )
    return buf.getvalue()
