import pytest

from forecasting.plotting import plot_forecast
from forecasting.training import build_model, forecast_document


def test_scene_only(tmp_path, tiny_scene):
    counts = plot_forecast(tiny_scene, None, str(tmp_path / "scene.png"))
    assert counts == {"history_lines": 2, "gt_lines": 2, "trajectory_lines": 0, "lof_points": 0}
    assert (tmp_path / "scene.png").stat().st_size > 0


def test_forecast_overlay(tmp_path, tiny_scene, tiny_config):
    forecast = forecast_document(build_model(tiny_config), tiny_scene)
    counts = plot_forecast(tiny_scene, forecast, str(tmp_path / "out" / "f.svg"), keyframe=0)
    assert counts["trajectory_lines"] == 4
    assert counts["lof_points"] == 20
    assert (tmp_path / "out" / "f.svg").read_text().startswith("<?xml")


def test_bad_keyframe(tmp_path, tiny_scene, tiny_config):
    forecast = forecast_document(build_model(tiny_config), tiny_scene)
    with pytest.raises(ValueError, match="keyframe"):
        plot_forecast(tiny_scene, forecast, str(tmp_path / "f.png"), keyframe=3)
