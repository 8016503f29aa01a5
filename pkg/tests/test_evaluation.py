import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

import oracles
from drvc.audio import AudioClip, MelSpectrogram
from drvc.config import AudioConfig
from drvc.errors import ContractError, EmptyInputError
from drvc.evaluation import (
    CepstralSequence,
    cepstra_from_mel,
    dtw,
    dtw_align,
    evaluate_pairs,
    extract_cepstra,
    freqt,
    mcd,
    write_report,
)


def seq(a, c0=True):
    return CepstralSequence(np.asarray(a, dtype=np.float64), includes_c0=c0)


# ----------------------------------------------------------------------------- MCD


def test_mcd_single_frame_hand_value(oracle_values):
    x, y = seq([[0.0, 1.0]]), seq([[0.0, 0.0]])
    assert math.isclose(mcd(x, y), oracle_values["mcd_single_frame_d1_diff1"], rel_tol=1e-6)
    assert abs(mcd(x, y) - 6.14186) < 1e-5


def test_mcd_identity_symmetry_and_order_check(rng):
    x, y = seq(rng.normal(size=(9, 5))), seq(rng.normal(size=(9, 5)))
    assert mcd(x, x) == 0.0
    diag = [(i, i) for i in range(9)]
    assert math.isclose(mcd(x, y, path=diag), mcd(y, x, path=diag), rel_tol=1e-12)
    with pytest.raises(ContractError):
        mcd(x, seq(rng.normal(size=(9, 4))))


def test_mcd_matches_oracle_on_path(rng):
    x, y = rng.normal(size=(7, 6)), rng.normal(size=(5, 6))
    path = dtw_align(seq(x), seq(y))
    ref = oracles.mcd_on_path(x[:, 1:], y[:, 1:], path)
    assert math.isclose(mcd(seq(x), seq(y)), ref, rel_tol=1e-12)


def test_c0_switch(rng):
    x, y = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    x[:, 0] = y[:, 0] = 0.7  # identical c0 in every frame of both sequences
    assert math.isclose(mcd(seq(x), seq(y), include_c0=True), mcd(seq(x), seq(y)), rel_tol=1e-12)
    y[:, 0] += 1.0
    assert mcd(seq(x), seq(y), include_c0=True) > mcd(seq(x), seq(y))


def test_time_stretch_is_absorbed(rng):
    y = rng.normal(size=(8, 5))
    x = np.repeat(y, [1, 3, 1, 1, 2, 1, 1, 4], axis=0)
    assert mcd(seq(x), seq(y)) < 1e-6


def test_cepstral_sequence_invariants():
    with pytest.raises(ContractError):
        seq(np.zeros((0, 3)))
    with pytest.raises(ContractError):
        seq([[np.nan, 1.0]])
    assert seq(np.zeros((2, 35))).order == 34
    assert seq(np.zeros((2, 34)), c0=False).order == 34


# ----------------------------------------------------------------------------- DTW


def test_dtw_identical_is_diagonal(rng):
    x = seq(rng.normal(size=(6, 3)))
    path, cost = dtw(x, x)
    assert path == [(i, i) for i in range(6)] and cost == 0.0


def test_dtw_degenerate_warp():
    x, y = seq([[0, 1.0], [0, 2.0], [0, 3.0]]), seq([[0, 0.0]])
    assert dtw_align(x, y) == [(0, 0), (1, 0), (2, 0)]


def test_dtw_brute_force_6x4(rng):
    for _ in range(20):
        x, y = seq(rng.normal(size=(6, 3))), seq(rng.normal(size=(4, 3)))
        dist = np.array([[oracles.euclid(a, b) for b in y.coeffs[:, 1:]] for a in x.coeffs[:, 1:]])
        _, cost = dtw(x, y)
        assert math.isclose(cost, oracles.brute_force_dtw(dist), rel_tol=1e-12)


def test_brute_force_enumerates_every_path():
    # count the leaves the oracle visits with an all-zero matrix
    tx, ty = 6, 6
    stack, leaves = [(0, 0)], 0
    while stack:
        i, j = stack.pop()
        if (i, j) == (tx - 1, ty - 1):
            leaves += 1
            continue
        stack += [(i + a, j + b) for a, b in ((1, 1), (1, 0), (0, 1)) if i + a < tx and j + b < ty]
    assert leaves == oracles.delannoy(5, 5) == 1683


@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 10_000))
@settings(max_examples=80, deadline=None)
def test_dtw_path_properties(tx, ty, seed):
    r = np.random.default_rng(seed)
    x, y = seq(r.normal(size=(tx, 3))), seq(r.normal(size=(ty, 3)))
    path, cost = dtw(x, y)
    assert path[0] == (0, 0) and path[-1] == (tx - 1, ty - 1)
    for (i0, j0), (i1, j1) in zip(path, path[1:]):
        assert (i1 - i0, j1 - j0) in {(1, 0), (0, 1), (1, 1)}
    d = cdist(x.coeffs[:, 1:], y.coeffs[:, 1:])
    assert math.isclose(cost, sum(d[i, j] for i, j in path), rel_tol=1e-12)


# ----------------------------------------------------------------------------- cepstra


def test_freqt_matches_allpass_frequency_map():
    c = np.zeros(30)
    c[:6] = [0.3, 0.5, -0.3, 0.2, -0.1, 0.05]
    warped = freqt(c[None], 400, 0.455)[0]
    w = np.linspace(0.01, np.pi - 0.01, 64)
    np.testing.assert_allclose(oracles.log_spectrum_min_phase(warped, oracles.allpass_phase(w, 0.455)),
                               oracles.log_spectrum_min_phase(c, w), atol=1e-9)


def test_freqt_alpha_zero_is_identity(rng):
    c = rng.normal(size=(3, 10))
    np.testing.assert_allclose(freqt(c, 9, 0.0), c, atol=1e-14)


def test_silence_cepstra_are_flat():
    cfg = AudioConfig()
    cep = extract_cepstra(AudioClip(np.zeros(8000), 22050), 34, 0.455, cfg)
    assert cep.coeffs.shape[1] == 35
    assert np.max(np.abs(cep.coeffs[:, 1:])) < 1e-3
    assert np.all(np.abs(cep.coeffs[:, 0]) > 1.0)


def test_extract_cepstra_deterministic_and_short_clip(rng):
    x = AudioClip(rng.normal(size=6000) * 0.1, 22050)
    np.testing.assert_array_equal(extract_cepstra(x).coeffs, extract_cepstra(x).coeffs)
    with pytest.raises(EmptyInputError):
        extract_cepstra(AudioClip(np.ones(100), 22050))


def test_white_noise_vs_one_frame_delay(rng):
    cfg = AudioConfig()
    noise = rng.normal(size=22050) * 0.1
    delayed = np.concatenate([rng.normal(size=cfg.hop_length) * 0.1, noise])
    cx = extract_cepstra(AudioClip(noise, 22050), cfg=cfg)
    cy = extract_cepstra(AudioClip(delayed, 22050), cfg=cfg)
    path = dtw_align(cx, cy)
    d = [np.linalg.norm(cx.coeffs[i, 1:] - cy.coeffs[j, 1:]) for i, j in path]
    assert np.median(d) < 1e-9
    assert sum(v < 1e-9 for v in d) >= len(d) - 2


def test_cepstra_from_mel_is_invertible_cosine_transform(rng):
    M = 16
    mel = MelSpectrogram(rng.normal(size=(5, M)), 22050, 256)
    cep = cepstra_from_mel(mel, order=M - 1).coeffs
    k = np.arange(M) + 0.5
    back = cep[:, :1] + cep[:, 1:] @ np.cos(np.pi * np.outer(np.arange(1, M), k) / M)
    np.testing.assert_allclose(back, mel.frames, atol=1e-10)
    const = cepstra_from_mel(MelSpectrogram(np.full((3, M), -2.0), 22050, 256), 10).coeffs
    np.testing.assert_allclose(const[:, 0], -2.0)
    np.testing.assert_allclose(const[:, 1:], 0.0, atol=1e-12)
    with pytest.raises(ContractError):
        cepstra_from_mel(mel, order=M)


# ----------------------------------------------------------------------------- pair evaluation


def test_evaluate_pairs_identical_and_single(rng):
    xs = [seq(rng.normal(size=(5, 4))) for _ in range(3)]
    res = evaluate_pairs(xs, xs)
    assert res.mean_mcd == 0.0 and res.std == 0.0
    one = evaluate_pairs(xs[:1], [seq(rng.normal(size=(5, 4)))])
    assert one.std == 0.0 and one.mean_mcd > 0


def test_evaluate_pairs_hand_average():
    conv = [seq([[0.0, d]]) for d in (1.0, 2.0, 3.0)]
    ref = [seq([[0.0, 0.0]])] * 3
    res = evaluate_pairs(conv, ref, [("a", "b"), ("c", "d"), ("e", "f")])
    per = [oracles.mcd_single_frame([d]) for d in (1.0, 2.0, 3.0)]
    assert [p.mcd for p in res.per_pair] == pytest.approx(per, rel=1e-12)
    assert res.mean_mcd == pytest.approx(sum(per) / 3, rel=1e-12)
    assert res.std == pytest.approx(np.std(per), rel=1e-12)
    assert [p.aligned_length for p in res.per_pair] == [1, 1, 1]


def test_evaluate_pairs_errors(rng):
    with pytest.raises(ContractError):
        evaluate_pairs([], [])
    with pytest.raises(ContractError):
        evaluate_pairs([seq(np.zeros((2, 3)))], [])


def test_report_files(tmp_path, rng):
    xs = [seq(rng.normal(size=(4, 3))) for _ in range(2)]
    ys = [seq(rng.normal(size=(5, 3))) for _ in range(2)]
    res = evaluate_pairs(xs, ys, distance_dump=tmp_path / "d.npz")
    write_report(res, tmp_path / "r.json", csv_path=tmp_path / "r.csv")
    payload = json.loads((tmp_path / "r.json").read_text())
    assert set(payload) == {"mean_mcd", "std", "pairs"}
    assert payload["mean_mcd"] == pytest.approx(np.mean([p["mcd"] for p in payload["pairs"]]))
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert len(rows) == 2 and set(rows[0]) == {"source_id", "target_id", "mcd", "aligned_length"}
    dump = np.load(tmp_path / "d.npz")
    assert dump["dist_0"].shape == (4, 5) and dump["path_1"].shape[1] == 2
