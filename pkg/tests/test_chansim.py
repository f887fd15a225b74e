import cmath
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chanfm.chansim import (
    SPEED_OF_LIGHT,
    ConfigError,
    CorruptDatasetError,
    PathComponent,
    ScenarioConfig,
    SceneRecord,
    SuiteEntry,
    SuiteSpec,
    build_dataset,
    build_suite,
    default_suite_spec,
    generate_dataset,
    generate_sample,
    load_dataset,
    read_scenes,
    synthesize,
)


def make_config(**kw):
    base = dict(id="cfg", T=4, S=8, F=16, delta_t=0.5e-3, delta_f=30e3, carrier_hz=3.5e9,
                P=6, tau_max=0.5e-6, speed_mps=15.0, n_samples=20, seed=7)
    base.update(kw)
    return ScenarioConfig(**base)


def direct_eval(cfg, scene):
    """Triple loop over the sum-of-paths formula, entry by entry."""
    H = np.zeros((cfg.T, cfg.S, cfg.F), dtype=complex)
    for t in range(cfg.T):
        for s in range(cfg.S):
            for f in range(cfg.F):
                for p in scene.paths:
                    phase = (p.doppler_hz * t * cfg.delta_t - p.tau_s * f * cfg.delta_f
                             + cfg.spacing_wl * s * math.sin(p.aoa_rad))
                    H[t, s, f] += p.gain * cmath.exp(2j * math.pi * phase)
    return H


def one_path(theta=0.0, tau=0.0, nu=0.0, gain=(1.0, 0.0)):
    return SceneRecord((PathComponent(gain[0], gain[1], tau, theta, nu),))


def test_synthesize_matches_direct_evaluation():
    cfg = make_config(T=3, S=4, F=5, P=4)
    _, scene = generate_sample(cfg, 3)
    np.testing.assert_allclose(synthesize(cfg, scene), direct_eval(cfg, scene), atol=1e-12)


def test_single_static_path_is_constant():
    cfg = make_config(P=1, speed_mps=0.0, tau_max=0.0)
    H = synthesize(cfg, one_path(theta=0.0))
    assert np.all(H == H[0, 0, 0])


def test_antenna_ratio_for_thirty_degrees():
    cfg = make_config(P=1, speed_mps=0.0, tau_max=0.0, spacing_wl=0.5)
    scene = one_path(theta=math.radians(30))
    H = synthesize(cfg, scene)
    oracle = direct_eval(cfg, scene)
    ratio = H[:, 1, :] / H[:, 0, :]
    expected = oracle[0, 1, 0] / oracle[0, 0, 0]
    assert expected == pytest.approx(1j, abs=1e-12)
    np.testing.assert_allclose(ratio, 1j, atol=1e-12)


def test_generate_sample_is_deterministic():
    cfg = make_config()
    a, sa = generate_sample(cfg, 5)
    b, sb = generate_sample(cfg, 5)
    assert a.values.tobytes() == b.values.tobytes()
    assert sa == sb
    c, _ = generate_sample(cfg, 6)
    assert not np.array_equal(a.values, c.values)


def test_generation_order_independent():
    cfg = make_config()
    ds = build_dataset(cfg)
    sample, _ = generate_sample(cfg, 11)
    assert np.array_equal(ds.csi[11], sample.values.astype(np.complex64))


def test_scene_has_exactly_p_paths_within_bounds():
    cfg = make_config(P=9)
    _, scene = generate_sample(cfg, 0)
    assert len(scene.paths) == 9
    nu_max = cfg.speed_mps * cfg.carrier_hz / SPEED_OF_LIGHT
    for p in scene.paths:
        assert 0.0 <= p.tau_s <= cfg.tau_max
        assert abs(p.doppler_hz) <= nu_max + 1e-9
        assert -math.pi / 2 <= p.aoa_rad <= math.pi / 2


@pytest.mark.parametrize("field,value", [
    ("T", 0), ("S", 0), ("F", 0), ("P", 0), ("n_samples", 0),
    ("delta_t", 0.0), ("delta_f", -1.0), ("tau_max", -1e-9), ("speed_mps", -1.0),
    ("rician_k", -0.5), ("carrier_hz", 0.0),
])
def test_invalid_config_names_field(field, value):
    with pytest.raises(ConfigError) as err:
        make_config(**{field: value})
    assert err.value.field == field
    assert field in str(err.value)


def test_sample_index_out_of_range():
    cfg = make_config(n_samples=3)
    with pytest.raises(ConfigError, match="sample_index"):
        generate_sample(cfg, 3)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), idx=st.integers(0, 19), k=st.sampled_from([0.0, 0.5, 3.0]))
def test_unit_total_path_power(seed, idx, k):
    cfg = make_config(seed=seed, rician_k=k)
    _, scene = generate_sample(cfg, idx)
    assert scene.total_power == pytest.approx(1.0, abs=1e-9)


def test_rician_first_path_power():
    cfg = make_config(rician_k=3.0)
    _, scene = generate_sample(cfg, 2)
    g0 = scene.paths[0]
    assert g0.gain_re**2 + g0.gain_im**2 == pytest.approx(0.75, abs=1e-12)


def test_mean_power_near_one():
    cfg = make_config(T=2, S=4, F=8, n_samples=1000)
    ds = build_dataset(cfg)
    assert np.mean(np.abs(ds.csi) ** 2) == pytest.approx(1.0, rel=0.10)


def test_zero_doppler_is_stationary():
    cfg = make_config(speed_mps=0.0)
    for i in range(5):
        H = generate_sample(cfg, i)[0].values
        assert np.all(H == H[0:1])


@settings(max_examples=40, deadline=None)
@given(theta=st.floats(-math.pi / 2, math.pi / 2), spacing=st.floats(0.1, 2.0))
def test_antenna_phase_law(theta, spacing):
    cfg = make_config(P=1, spacing_wl=spacing)
    H = synthesize(cfg, one_path(theta=theta, tau=1e-7, nu=40.0, gain=(0.6, 0.8)))
    step = H[:, 1:, :] / H[:, :-1, :]
    np.testing.assert_allclose(step, cmath.exp(2j * math.pi * spacing * math.sin(theta)), atol=1e-9)


# -- persistence -------------------------------------------------------------

def test_dataset_files_byte_identical(tmp_path):
    cfg = make_config(n_samples=100, seed=42, T=2, S=4, F=8)
    m1 = generate_dataset(cfg, tmp_path / "a")
    m2 = generate_dataset(cfg, tmp_path / "b")
    for name in ("csi.bin", "scenes.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert m1.digests == m2.digests


def test_payload_size(tmp_path):
    cfg = make_config(T=4, S=16, F=64, n_samples=10)
    generate_dataset(cfg, tmp_path)
    raw = (tmp_path / "csi.bin").read_bytes()
    header = 4 + 5 * 4
    assert len(raw) - header == 10 * 4 * 16 * 64 * 2 * 4
    assert raw[:4] == b"SOMC"
    assert np.frombuffer(raw[4:24], dtype="<u4").tolist() == [1, 4, 16, 64, 10]


def test_csi_record_layout(tmp_path):
    cfg = make_config(T=2, S=3, F=4, n_samples=2)
    generate_dataset(cfg, tmp_path)
    body = np.frombuffer((tmp_path / "csi.bin").read_bytes()[24:], dtype="<f4")
    H = generate_sample(cfg, 1)[0].values.astype(np.complex64)
    # sample 1, t=1, s=2, f=3: t-major then s then f, (re, im) interleaved
    off = 2 * (1 * 2 * 3 * 4 + ((1 * 3) + 2) * 4 + 3)
    assert body[off] == H[1, 2, 3].real and body[off + 1] == H[1, 2, 3].imag


def test_scenes_file_layout(tmp_path):
    cfg = make_config(n_samples=3, P=5)
    generate_dataset(cfg, tmp_path)
    raw = (tmp_path / "scenes.bin").read_bytes()
    assert raw[:4] == b"SOMS"
    assert np.frombuffer(raw[4:16], dtype="<u4").tolist() == [1, 3, 5]
    scenes = read_scenes(tmp_path / "scenes.bin")
    ref = generate_sample(cfg, 2)[1].as_array().astype(np.float32)
    assert np.array_equal(scenes[2], ref)


def test_manifest_contents_and_roundtrip(tmp_path):
    cfg = make_config(n_samples=4, held_out=True)
    manifest = generate_dataset(cfg, tmp_path)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["held_out"] is True
    assert doc["n_samples"] == 4
    assert set(doc["digests"]) == {"csi.bin", "scenes.bin"}
    assert all(len(v) == 64 for v in doc["digests"].values())
    ds = load_dataset(tmp_path)
    assert ds.config == cfg
    assert np.array_equal(ds.csi, build_dataset(cfg).csi)
    assert ds.csi_digest == manifest.csi_digest


def test_in_memory_digest_matches_file(tmp_path):
    cfg = make_config(n_samples=3)
    manifest = generate_dataset(cfg, tmp_path)
    assert build_dataset(cfg).csi_digest == manifest.csi_digest


def test_corruption_detected(tmp_path):
    cfg = make_config(n_samples=3)
    generate_dataset(cfg, tmp_path)
    raw = bytearray((tmp_path / "csi.bin").read_bytes())
    raw[-1] ^= 0xFF
    (tmp_path / "csi.bin").write_bytes(bytes(raw))
    with pytest.raises(CorruptDatasetError, match="digest"):
        load_dataset(tmp_path)


def test_zero_samples_rejected(tmp_path):
    with pytest.raises(ConfigError, match="n_samples"):
        generate_dataset(make_config(n_samples=0), tmp_path)


# -- suites ------------------------------------------------------------------

def test_default_suite():
    configs = build_suite(default_suite_spec(seed=3))
    assert len(configs) == 8
    assert sum(c.held_out for c in configs) == 1
    assert sum(not c.held_out for c in configs) == 7
    held = next(c for c in configs if c.held_out)
    assert (held.S, held.F) == (16, 64)
    assert {c.S for c in configs} == {4, 16}
    assert {c.F for c in configs} == {16, 64}
    assert {c.T for c in configs} == {4, 8}
    assert {c.speed_mps for c in configs} == {0.5, 15.0}
    assert len({c.id for c in configs}) == 8
    assert len({c.seed for c in configs}) == 8


def test_full_suite_has_sixteen_ids():
    configs = build_suite(default_suite_spec(full=True))
    assert len({c.id for c in configs}) == 16
    assert len({c.seed for c in configs}) == 16


def test_duplicate_ids_rejected():
    params = default_suite_spec().entries[0].params
    spec = SuiteSpec([SuiteEntry("A", params), SuiteEntry("A", params, held_out=True)], seed=0, n_samples=2)
    with pytest.raises(ConfigError, match="duplicate"):
        build_suite(spec)


def test_suite_needs_held_out_and_two_configs():
    params = default_suite_spec().entries[0].params
    with pytest.raises(ConfigError):
        build_suite(SuiteSpec([SuiteEntry("A", params, held_out=True)], 0, 2))
    with pytest.raises(ConfigError, match="held-out"):
        build_suite(SuiteSpec([SuiteEntry("A", params), SuiteEntry("B", params)], 0, 2))


def test_suite_seed_changes_data():
    a = build_suite(default_suite_spec(seed=1))
    b = build_suite(default_suite_spec(seed=2))
    assert [c.id for c in a] == [c.id for c in b]
    assert all(x.seed != y.seed for x, y in zip(a, b))
