import numpy as np
import pytest

from forecast_peft.errors import DataError
from forecast_peft.io import load_predictions, load_scenes, save_predictions, save_scenes
from forecast_peft.scene import generate_synthetic, nu_like_profile


def test_scene_round_trip(tmp_path, desk_scenes):
    save_scenes(tmp_path / "s.fpsc", desk_scenes)
    back = load_scenes(tmp_path / "s.fpsc")
    assert len(back) == len(desk_scenes)
    for a, b in zip(desk_scenes, back):
        assert a.scene_id == b.scene_id and a.dataset_tag == b.dataset_tag
        for x, y in zip(a.agents, b.agents):
            assert np.array_equal(x.history, y.history)
            assert np.array_equal(x.future_valid, y.future_valid)
        for x, y in zip(a.lanes, b.lanes):
            assert np.array_equal(x.points, y.points) and np.array_equal(x.point_valid, y.point_valid)


def test_round_trip_other_profile(tmp_path):
    scenes = generate_synthetic(1, 3, nu_like_profile())
    save_scenes(tmp_path / "n.fpsc", scenes)
    back = load_scenes(tmp_path / "n.fpsc")
    assert back[0].sample_rate_hz == scenes[0].sample_rate_hz
    assert np.array_equal(back[2].target.history_valid, scenes[2].target.history_valid)


def test_prediction_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    traj = rng.normal(size=(4, 3, 12, 2)).astype(np.float32)
    conf = rng.dirichlet(np.ones(3), size=4).astype(np.float32)
    save_predictions(tmp_path / "p.fppr", [5, 6, 7, 8], traj, conf)
    ids, t, c = load_predictions(tmp_path / "p.fppr")
    assert ids.tolist() == [5, 6, 7, 8]
    assert np.array_equal(t, traj) and np.array_equal(c, conf)


def test_wrong_magic(tmp_path, desk_scenes):
    save_scenes(tmp_path / "s.fpsc", desk_scenes[:1])
    with pytest.raises(DataError):
        load_predictions(tmp_path / "s.fpsc")


def test_missing_and_truncated(tmp_path, desk_scenes):
    with pytest.raises(DataError):
        load_scenes(tmp_path / "nope.fpsc")
    save_scenes(tmp_path / "s.fpsc", desk_scenes[:2])
    raw = (tmp_path / "s.fpsc").read_bytes()
    (tmp_path / "t.fpsc").write_bytes(raw[:-7])
    with pytest.raises(DataError):
        load_scenes(tmp_path / "t.fpsc")
