"""Persistence: checkpoint container round trips and error taxonomy,
PGM goldens, selection documents, and CSV writers."""

import json

import numpy as np
import pytest

from ditlab.artifacts import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    SelectionFormatError,
    load_checkpoint,
    load_selection,
    montage,
    save_checkpoint,
    selection_doc,
    write_ledger_csv,
    write_pgm,
    write_run_config,
    write_trajectory_csv,
)
from ditlab.attention import HeadId, PerturbSpec
from ditlab.model import DitConfig, init_weights
from ditlab.sampler import GuidanceConfig, SampleResult
from ditlab.search import SearchConfig, SearchState


@pytest.fixture(scope="module")
def weights():
    return init_weights(DitConfig(), seed=3)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_byte_identical(tmp_path, weights):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(weights, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for name, arr in weights.params.items():
        assert np.array_equal(loaded.params[name], arr)
    assert loaded.config == weights.config


def test_checkpoint_bad_magic(tmp_path, weights):
    p = tmp_path / "m.ckpt"
    save_checkpoint(weights, p)
    data = bytearray(p.read_bytes())
    data[0] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(CheckpointMagicError):
        load_checkpoint(p)


def test_checkpoint_truncated_payload(tmp_path, weights):
    p = tmp_path / "t.ckpt"
    save_checkpoint(weights, p)
    data = p.read_bytes()
    p.write_bytes(data[: len(data) - 9])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(p)


def test_checkpoint_truncated_header(tmp_path, weights):
    p = tmp_path / "h.ckpt"
    save_checkpoint(weights, p)
    p.write_bytes(p.read_bytes()[:10])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(p)


def test_checkpoint_trailing_garbage_is_truncation_error(tmp_path, weights):
    p = tmp_path / "g.ckpt"
    save_checkpoint(weights, p)
    p.write_bytes(p.read_bytes() + b"\x00" * 8)
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(p)


def test_checkpoint_shape_disagreement(tmp_path, weights):
    p = tmp_path / "s.ckpt"
    save_checkpoint(weights, p)
    data = p.read_bytes()
    header_len = int.from_bytes(data[8:12], "little")
    header = json.loads(data[12 : 12 + header_len])
    header["params"][0][1] = [9, 9]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    p.write_bytes(
        data[:8] + len(blob).to_bytes(4, "little") + blob + data[12 + header_len :]
    )
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(p)


def test_checkpoint_garbled_header_json(tmp_path, weights):
    p = tmp_path / "j.ckpt"
    save_checkpoint(weights, p)
    data = bytearray(p.read_bytes())
    data[12] = ord("!")
    p.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_error_taxonomy_is_distinct():
    kinds = {CheckpointMagicError, CheckpointTruncatedError, CheckpointShapeError}
    assert len(kinds) == 3
    for k in kinds:
        assert issubclass(k, CheckpointError)


# ---------------------------------------------------------------------------
# PGM export


def test_pgm_goldens(tmp_path):
    cases = [(-3.0, 0), (3.0, 255), (0.0, 128)]
    for value, pixel in cases:
        p = tmp_path / f"v{pixel}.pgm"
        write_pgm(np.full((16, 16), value), p)
        data = p.read_bytes()
        assert data[:12] == b"P5\n16 16\n255"
        payload = data.split(b"255\n", 1)[1]
        assert payload == bytes([pixel]) * 256


def test_pgm_clamps_out_of_range(tmp_path):
    p = tmp_path / "c.pgm"
    write_pgm(np.full((16, 16), 99.0), p)
    assert p.read_bytes().endswith(bytes([255]) * 256)


def test_pgm_rejects_non_finite(tmp_path):
    with pytest.raises(FloatingPointError):
        write_pgm(np.full((16, 16), np.nan), tmp_path / "n.pgm")


def test_montage_layout():
    imgs = [np.zeros((4, 4)), np.ones((4, 4))]
    strip = montage(imgs, pad=1, fill=3.0)
    assert strip.shape == (4, 9)
    assert np.array_equal(strip[:, :4], imgs[0])
    assert np.array_equal(strip[:, 4], np.full(4, 3.0))
    assert np.array_equal(strip[:, 5:], imgs[1])
    with pytest.raises(ValueError):
        montage([np.zeros((4, 4)), np.zeros((3, 3))])


# ---------------------------------------------------------------------------
# selection documents


def make_state_and_cfg():
    ledger_round1 = (
        (HeadId(0, 1), 0.9),
        (HeadId(1, 0), 0.7),
        (HeadId(0, 0), 0.4),
        (HeadId(1, 1), 0.1),
    )
    ledger_round2 = (
        (HeadId(1, 1), 0.95),
        (HeadId(1, 0), 0.6),
    )
    state = SearchState(
        selected=(HeadId(0, 1), HeadId(1, 1)),
        pool=(HeadId(0, 0), HeadId(1, 0)),
        ledger=(ledger_round1, ledger_round2),
    )
    cfg = SearchConfig(
        k=1,
        rounds=2,
        pairs=((0, 11), (None, 12)),
        guidance=GuidanceConfig(w_pert=3.0, steps=20),
        method="soft_pag",
        u=0.5,
        objective="brightness",
    )
    return state, cfg


def test_selection_doc_round_trip(tmp_path):
    state, cfg = make_state_and_cfg()
    path = tmp_path / "sel.json"
    doc = selection_doc(state, cfg, path)
    heads, spec, loaded = load_selection(path)
    assert heads == state.selected
    assert spec == PerturbSpec(frozenset(state.selected), "soft_pag", 0.5, 1.0)
    assert loaded == doc
    assert loaded["config"]["pairs"] == [[0, 11], [None, 12]]
    assert [r["best"][:2] for r in loaded["rounds"]] == [[0, 1], [1, 1]]


def test_selection_doc_rejects_empty_search(tmp_path):
    _, cfg = make_state_and_cfg()
    with pytest.raises(ValueError, match="no rounds"):
        selection_doc(SearchState(), cfg, tmp_path / "x.json")


def test_selection_doc_deterministic_bytes(tmp_path):
    state, cfg = make_state_and_cfg()
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    selection_doc(state, cfg, a)
    selection_doc(state, cfg, b)
    assert a.read_bytes() == b.read_bytes()


def test_load_selection_rejects_malformed(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(SelectionFormatError):
        load_selection(bad)
    bad.write_text(json.dumps({"format": "other"}))
    with pytest.raises(SelectionFormatError):
        load_selection(bad)
    bad.write_text(json.dumps({"format": "ditlab-selection-v1"}))
    with pytest.raises(SelectionFormatError):
        load_selection(bad)


# ---------------------------------------------------------------------------
# CSV writers


def test_ledger_csv_format(tmp_path):
    state, _ = make_state_and_cfg()
    path = tmp_path / "ledger.csv"
    write_ledger_csv(state, path)
    lines = path.read_text().split("\n")
    assert lines[0] == "round,layer,head,score,rank"
    assert lines[1] == "1,0,1,0.9,1"
    assert lines[4] == "1,1,1,0.1,4"
    assert lines[5] == "2,1,1,0.95,1"
    # repr floats re-parse exactly
    assert float(lines[1].split(",")[3]) == 0.9


def test_trajectory_csv(tmp_path):
    states = [np.full((2, 2), float(i)) for i in range(3)]
    base_states = [s + 1.0 for s in states]
    run = SampleResult(image=states[-1], states=states, ts=[1.0, 0.5, 0.0])
    base = SampleResult(image=base_states[-1], states=base_states,
                        ts=[1.0, 0.5, 0.0])
    path = tmp_path / "traj.csv"
    write_trajectory_csv(run, base, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,t,mean,std,l2_to_unguided"
    step, t, mean, std, dist = lines[1].split(",")
    assert (int(step), float(t), float(mean), float(std)) == (0, 1.0, 0.0, 0.0)
    assert float(dist) == pytest.approx(2.0)  # sqrt(4 * 1^2)
    with pytest.raises(ValueError):
        write_trajectory_csv(run, SampleResult(image=states[0], states=states[:2],
                                               ts=[1.0, 0.5]), path)


def test_run_config_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    cfg = {"steps": 20, "w_pert": 3.0, "heads": [[0, 1]]}
    write_run_config(cfg, a)
    write_run_config(dict(reversed(list(cfg.items()))), b)
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(a.read_text()) == cfg
