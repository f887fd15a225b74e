import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chanfm.chansim import ConfigError, ScenarioConfig, build_dataset
from chanfm.evalbench import (
    EvalReport,
    ZeroPowerError,
    baseline_predict,
    make_entry,
    nmse,
    read_report,
    split_indices,
    task_specific_train_eval,
    write_report,
    zero_shot_eval,
)
from chanfm.trainkit import LeakageError, TrainConfig
from chanfm.wifomodel import ModelConfig, PatchSpec, task_region

TINY = ModelConfig(embed_dim=12, encoder_depth=1, decoder_dim=6, decoder_depth=1, n_heads=2,
                   patch=PatchSpec(1, 2, 2))


def make_config(**kw):
    base = dict(id="ev", T=4, S=4, F=8, delta_t=0.5e-3, delta_f=30e3, carrier_hz=3.5e9,
                P=4, tau_max=0.5e-6, speed_mps=15.0, n_samples=10, seed=3)
    base.update(kw)
    return ScenarioConfig(**base)


def complex_arrays(seed, shape=(3, 4, 5)):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_nmse_identities(seed):
    h = complex_arrays(seed)
    assert nmse(h, h) == 0.0
    assert abs(nmse(np.zeros_like(h), h) - 1.0) <= 1e-12
    assert abs(nmse(2 * h, h) - 1.0) <= 1e-12
    assert nmse(complex_arrays(seed + 1), h) >= 0.0


def test_nmse_region_and_errors():
    h = complex_arrays(0)
    region = np.zeros(h.shape, bool)
    region[..., -2:] = True
    pred = h.copy()
    pred[..., :-2] = 0  # errors outside the region are ignored
    assert nmse(pred, h, region) == 0.0
    with pytest.raises(ZeroPowerError):
        nmse(h, np.zeros_like(h))
    with pytest.raises(ValueError, match="shape"):
        nmse(h[:1], h)


# -- baselines ---------------------------------------------------------------

def test_copy_last_on_static_channel():
    ds = build_dataset(make_config(speed_mps=0.0))
    region = task_region(ds.config.shape, "time", 2)
    assert nmse(baseline_predict(ds.csi, "time", 2, "copy_last"), ds.csi, region) == 0.0


def test_copy_nearest_freq_on_flat_channel():
    ds = build_dataset(make_config(tau_max=0.0))
    region = task_region(ds.config.shape, "frequency", 4)
    assert nmse(baseline_predict(ds.csi, "frequency", 4, "copy_nearest_freq"), ds.csi, region) == 0.0


def test_linear_extrap_on_linear_trajectory():
    a, b = complex_arrays(1, (4, 8)), complex_arrays(2, (4, 8))
    t = np.arange(6.0)[:, None, None]
    h = a[None] + b[None] * t  # exactly linear in time per (s, f)
    region = task_region(h.shape, "time", 3)
    assert nmse(baseline_predict(h, "time", 3, "linear_extrap"), h, region) < 1e-24
    hf = np.moveaxis(h, 0, -1)
    region = task_region(hf.shape, "frequency", 3)
    assert nmse(baseline_predict(hf, "frequency", 3, "linear_extrap"), hf, region) < 1e-24


def test_baselines_leave_known_region_alone():
    h = complex_arrays(3, (4, 4, 8))
    for kind, h_, method in (("time", 2, "copy_last"), ("frequency", 4, "copy_nearest_freq"),
                             ("frequency", 4, "linear_extrap")):
        out = baseline_predict(h, kind, h_, method)
        known = ~task_region(h.shape, kind, h_)
        assert np.array_equal(out[known], h[known])


def test_baseline_errors():
    h = complex_arrays(4, (4, 4, 8))
    with pytest.raises(ValueError, match="2 known"):
        baseline_predict(h, "time", 3, "linear_extrap")
    with pytest.raises(ValueError):
        baseline_predict(h, "frequency", 4, "copy_last")
    with pytest.raises(ValueError):
        baseline_predict(h, "time", 1, "nope")


# -- split and task-specific baseline ---------------------------------------

def test_split_is_disjoint_80_20():
    tr, te = split_indices(10)
    assert tr.tolist() == list(range(8)) and te.tolist() == [8, 9]
    assert not set(tr) & set(te)
    with pytest.raises(ConfigError):
        split_indices(1)


def test_task_specific_zero_steps_is_poor_and_deterministic():
    ds = build_dataset(make_config(n_samples=10))
    values = []
    for seed in range(3):
        tc = TrainConfig(steps=0, seed=seed, task="frequency")
        e = task_specific_train_eval(ds, TINY, tc)
        assert e.n_samples == 2
        values.append(e.nmse_linear)
    assert all(v > 0.5 for v in values)
    again = task_specific_train_eval(ds, TINY, TrainConfig(steps=3, seed=1, task="frequency"))
    twice = task_specific_train_eval(ds, TINY, TrainConfig(steps=3, seed=1, task="frequency"))
    # wall-clock latency is the only field allowed to differ
    assert replace(again, batch_ms=0.0) == replace(twice, batch_ms=0.0)
    assert again.params_trainable == again.params_total > 0


# -- zero-shot ---------------------------------------------------------------

class OracleModel:
    """Test double: returns the truth it is handed, so every task is perfect."""

    provenance: dict = {}

    def predict(self, values, kind, horizon, scenes=None):
        return np.array(values, copy=True)


def test_oracle_zero_shot_is_perfect():
    ds = build_dataset(make_config(held_out=True))
    report = zero_shot_eval(OracleModel(), ds, baselines=False)
    assert {e.task for e in report} == {"time", "frequency"}
    for e in report:
        assert e.nmse_linear == 0.0
        assert e.params_trainable == 0
        assert "trainable 0" in e.accounting()


def test_zero_shot_guards():
    plain = build_dataset(make_config())
    with pytest.raises(LeakageError, match="held-out"):
        zero_shot_eval(OracleModel(), plain)
    held = build_dataset(make_config(held_out=True))
    leaky = OracleModel()
    leaky.provenance = {"pretrained_on": [{"id": held.id, "csi_digest": held.csi_digest}]}
    with pytest.raises(LeakageError, match="used in training"):
        zero_shot_eval(leaky, held)


def test_zero_shot_includes_baselines():
    ds = build_dataset(make_config(held_out=True))
    report = zero_shot_eval(OracleModel(), ds)
    methods = {(e.method, e.task) for e in report}
    assert ("copy_last", "time") in methods
    assert ("copy_nearest_freq", "frequency") in methods
    assert ("linear_extrap", "frequency") in methods
    assert report.get("copy_last", "time").horizon == 2


# -- reports -----------------------------------------------------------------

def sample_report():
    rng = np.random.default_rng(0)
    entries = [make_entry(m, "ds", t, 2, float(rng.uniform(1e-6, 2)), 40, (0, 1, 2), (123, 4567), rng.uniform(0, 9))
               for m in ("a", "b") for t in ("time", "frequency")]
    entries.append(make_entry("c", "ds", "time", 2, 1 / 3, 40))
    return EvalReport(entries)


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_report_round_trip(tmp_path, fmt):
    rep = sample_report()
    path = write_report(rep, tmp_path / f"r.{fmt}", fmt)
    back = read_report(path)
    assert back.entries == rep.entries
    for e in back:
        assert abs(e.nmse_db - 10 * math.log10(e.nmse_linear)) <= 1e-9


def test_csv_header_order(tmp_path):
    path = write_report(sample_report(), tmp_path / "r.csv")
    assert path.read_text().splitlines()[0] == (
        "method,dataset_id,task,horizon,nmse_linear,nmse_db,n_samples,seeds,params_trainable,params_total,batch_ms")


def test_empty_report_rejected(tmp_path):
    with pytest.raises(ValueError, match="empty"):
        write_report(EvalReport(), tmp_path / "r.csv")
