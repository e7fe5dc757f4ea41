import itertools
from fractions import Fraction

import numpy as np
import pytest

from scheme.accounting import (
    PLAN_COLUMNS,
    cca_macs,
    cost_report,
    effective_expansion,
    iso_flop_plan,
    mixer_macs,
    mixer_params,
    plan_csv,
    weight_params,
)
from scheme.errors import ConfigError
from scheme.mixers import MixerConfig, init_params

from conftest import block_diag_embed


def count_entries(cfg):
    """Brute force: count the stored entries of every weight block and bias."""
    p = init_params(cfg, np.random.default_rng(0), with_alpha=False)
    weights = sum(block.size for block in p.W1_blocks) + sum(block.size for block in p.W2_blocks)
    return weights, weights + p.b1.size + p.b2.size


def count_loop_macs(cfg, n_tokens):
    """Brute force: iterations of a naive matmul loop that skips structural zeros."""
    p = init_params(cfg, np.random.default_rng(0), with_alpha=False)
    total = 0
    for dense in (block_diag_embed(p.W1.data), block_diag_embed(p.W2.data)):
        for i, j in itertools.product(range(dense.shape[0]), range(dense.shape[1])):
            if dense[i, j] != 0.0:  # normal init is nonzero almost surely
                total += n_tokens
    return total


def test_param_examples():
    assert mixer_params(MixerConfig(d=64, E=8, g1=4, g2=4)) == 16960
    assert mixer_params(MixerConfig(d=64, E=2)) == 16576
    assert mixer_params(MixerConfig(d=1, E=1)) == 4


def test_mac_examples():
    dense = MixerConfig(d=64, E=4)
    grouped = MixerConfig(d=64, E=16, g1=4, g2=4)
    assert mixer_macs(dense, 16) == 524288
    assert mixer_macs(grouped, 16) == 524288
    assert mixer_macs(dense, 16, include_cca=True) - mixer_macs(dense, 16) == 131072
    assert cca_macs(64, 16) == 131072
    with pytest.raises(ConfigError):
        mixer_macs(dense, 0)


def _grid(ds=(4, 8, 16, 64), Es=(1, 2, 4, 8, 16), gs=(1, 2, 4, 8)):
    for d, E, g1, g2 in itertools.product(ds, Es, gs, gs):
        cfg = MixerConfig(d=d, E=E, g1=g1, g2=g2)
        try:
            cfg.validate()
        except ConfigError:
            continue
        yield cfg


def test_params_match_enumeration():
    for cfg in _grid():
        weights, total = count_entries(cfg)
        assert weight_params(cfg) == weights
        assert mixer_params(cfg) == total


def test_macs_match_loop_counter():
    for cfg in _grid(ds=(4, 8, 16), Es=(1, 2, 4)):
        assert mixer_macs(cfg, 3) == count_loop_macs(cfg, 3)


def test_effective_expansion_examples():
    assert effective_expansion(2, 4, 4) == 8
    assert effective_expansion(5, 1, 1) == 5
    assert effective_expansion(3, 1, 2) == 4
    assert effective_expansion(Fraction(3, 2), 2, 2) == 3
    with pytest.raises(ConfigError):
        effective_expansion(2, 0, 1)


def test_iso_flop_identity_and_weights():
    checked = 0
    for d, E, g1, g2 in itertools.product((8, 16, 32, 64, 128), (1, 2, 3, 4), (1, 2, 4, 8), (1, 2, 4, 8)):
        dense = MixerConfig(d=d, E=E)
        grouped = MixerConfig(d=d, E=effective_expansion(E, g1, g2), g1=g1, g2=g2)
        try:
            dense.validate()
            grouped.validate()
        except ConfigError:
            continue
        assert mixer_macs(grouped, 7) == mixer_macs(dense, 7)
        assert weight_params(grouped) == weight_params(dense)
        assert mixer_params(grouped) - mixer_params(dense) == grouped.hidden - dense.hidden
        checked += 1
    assert checked >= 100


def test_baseline_pairing_11e2_44e8():
    base, scheme = MixerConfig(d=64, E=2), MixerConfig(d=64, E=8, g1=4, g2=4)
    assert effective_expansion(2, 4, 4) == scheme.E
    assert mixer_macs(base, 196) == mixer_macs(scheme, 196)
    assert weight_params(base) == weight_params(scheme)


def test_cost_report_modes():
    cfg = MixerConfig(d=32, E=8, g1=4, g2=4)
    train = cost_report(cfg, 64)
    infer = cost_report(MixerConfig(d=32, E=8, g1=4, g2=4, mode="inference"), 64)
    assert train.includes_cca and not infer.includes_cca
    assert train.macs_total - infer.macs_total == 2 * 64 * 32 * 32
    assert infer.macs_total == 64 * infer.macs_per_token
    assert train.flops_total == 2 * train.macs_total


def test_plan_example():
    budget = mixer_macs(MixerConfig(d=64, E=2), 1)
    assert budget == 16384
    plan = iso_flop_plan(64, budget, [2, 4, 8], [1, 2, 4])
    found = {(c.E, c.g1, c.g2) for c, _ in plan}
    assert {(2, 1, 1), (4, 2, 2), (8, 4, 4)} <= found
    for cfg, rep in plan:
        assert abs(rep.macs_per_token - budget) <= 0.01 * budget
    assert [c.name for c, _ in plan][0] == "44-e8"
    keys = [(-r.effective_expansion, r.params, c.g1, c.g2) for c, r in plan]
    assert keys == sorted(keys)


def test_plan_edge_cases():
    assert iso_flop_plan(64, 0, [2], [1]) == []
    plan = iso_flop_plan(32, mixer_macs(MixerConfig(d=32, E=2), 1), [2, 6], [1, 3])
    assert all(c.g1 != 3 and c.g2 != 3 for c, _ in plan)
    with pytest.raises(ConfigError):
        iso_flop_plan(32, 10, [], [1])


def test_plan_csv():
    plan = iso_flop_plan(64, 16384, [2, 8], [1, 4])
    lines = plan_csv(plan).splitlines()
    assert lines[0] == ",".join(PLAN_COLUMNS)
    assert lines[1] == "44-e8,64,8,4,4,16960,16384,32"
    assert lines[-1] == "11-e2,64,2,1,1,16576,16384,2"
