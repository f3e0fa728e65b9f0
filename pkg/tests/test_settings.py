import pytest

from config.settings import PipelineConfig, TileSpec
from src.settlements.errors import ConfigError


def test_defaults():
    config = PipelineConfig()
    assert config.tiles.tile_size == 128
    assert config.tiles.stride == 64
    assert config.undersample.ratio == 4.0
    assert (config.train.learning_rate, config.train.epochs, config.train.batch_size) == (0.1, 200, 32)
    assert config.postprocess.p_min == 0.5
    assert config.postprocess.coverage_min == 0.5
    assert config.val_fraction == 0.2


def test_stride_follows_tile_size():
    assert TileSpec(tile_size=32).stride == 16
    assert TileSpec(tile_size=1).stride == 1


def test_from_file(tmp_path):
    path = tmp_path / 'config.yml'
    path.write_text(
        "paths:\n  raster: a.tif\n  truth: t.geojson\ntiles:\n  tile_size: 16\n  stride: 16\nseed: 7\n",
        encoding='utf-8')
    config = PipelineConfig.from_file(str(path))
    assert config.paths.raster == 'a.tif'
    assert config.paths.predict_raster == 'a.tif'
    assert config.paths.eval_truth == 't.geojson'
    assert (config.tiles.tile_size, config.tiles.stride) == (16, 16)
    assert config.seed == 7


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({'tiles': {'size': 3}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({'bogus': 1})


def test_missing_or_malformed_file(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig.from_file(str(tmp_path / 'none.yml'))
    bad = tmp_path / 'bad.yml'
    bad.write_text("- just\n- a list\n", encoding='utf-8')
    with pytest.raises(ConfigError):
        PipelineConfig.from_file(str(bad))


def test_from_environment(tmp_path, monkeypatch):
    path = tmp_path / 'env.yml'
    path.write_text("seed: 99\n", encoding='utf-8')
    monkeypatch.setenv('SETTLEMENT_MAP_CONFIG', str(path))
    assert PipelineConfig.from_environment().seed == 99
    monkeypatch.delenv('SETTLEMENT_MAP_CONFIG')
    assert PipelineConfig.from_environment().seed == 42


def test_overrides_take_precedence():
    config = PipelineConfig.from_dict({'tiles': {'tile_size': 64, 'stride': 64}, 'seed': 1})
    updated = config.with_overrides(tile_size=32, p_min=0.7, seed=5, epochs=None)
    assert updated.tiles.tile_size == 32
    assert updated.tiles.stride == 16
    assert updated.postprocess.p_min == 0.7
    assert updated.seed == 5
    assert updated.train.epochs == 200
    assert config.tiles.tile_size == 64


def test_raster_override_retargets_prediction_raster():
    config = PipelineConfig.from_dict({'paths': {'raster': 'a.tif', 'predict_raster': 'b.tif'}})
    assert config.with_overrides(raster='c.tif').paths.predict_raster == 'b.tif'
    plain = PipelineConfig.from_dict({'paths': {'raster': 'a.tif'}})
    assert plain.with_overrides(raster='c.tif').paths.predict_raster == 'c.tif'


def test_unknown_override():
    with pytest.raises(ConfigError):
        PipelineConfig().with_overrides(colour='red')


@pytest.mark.parametrize("overrides", [
    {'tile_size': 0},
    {'tile_size': 16, 'stride': 32},
    {'undersample_ratio': 0},
    {'val_fraction': 1.0},
    {'learning_rate': 0},
    {'epochs': 0},
    {'p_min': 1.5},
    {'eval_resolution': 0},
    {'threads': -1},
])
def test_validate_ranges(overrides):
    with pytest.raises(ConfigError):
        PipelineConfig().with_overrides(**overrides).validate()


def test_stage_seeds_are_stable_and_distinct():
    config = PipelineConfig(seed=42)
    assert config.stage_seed('split') == PipelineConfig(seed=42).stage_seed('split')
    assert config.stage_seed('split') != config.stage_seed('undersample')
    assert config.stage_seed('split') != PipelineConfig(seed=43).stage_seed('split')
    assert 0 <= config.stage_seed('train') < 2 ** 64
