import pytest

from src.settlements.cli import build_parser, load_config, main


def last_error_line(capsys):
    return capsys.readouterr().err.strip().splitlines()[-1]


def test_flags_override_config_file(tmp_path):
    config_file = tmp_path / 'c.yml'
    config_file.write_text("tiles:\n  tile_size: 64\n  stride: 32\npostprocess:\n  p_min: 0.4\n", encoding='utf-8')
    args = build_parser().parse_args(['predict', '--config', str(config_file), '--stride', '16',
                                      '--p-min', '0.6', '--no-block-filter'])
    config = load_config(args)
    assert (config.tiles.tile_size, config.tiles.stride) == (64, 16)
    assert config.postprocess.p_min == 0.6
    assert config.postprocess.block_filter is False


def test_unset_flags_keep_config_values(tmp_path):
    config_file = tmp_path / 'c.yml'
    config_file.write_text("seed: 9\nthreads: 2\n", encoding='utf-8')
    config = load_config(build_parser().parse_args(['train', '--config', str(config_file)]))
    assert config.seed == 9
    assert config.threads == 2


def test_synth_then_build_dataset(tmp_path, capsys):
    scene = tmp_path / 'scene'
    assert main(['synth', '--quiet', '--out', str(scene), '--width', '128', '--height', '128',
                 '--patches', '1', '--seed', '3']) == 0
    assert (scene / 'synthetic.tif').exists()

    code = main(['build-dataset', '--quiet', '--raster', str(scene / 'synthetic.tif'),
                 '--truth', str(scene / 'truth.geojson'), '--tile-size', '16', '--stride', '16',
                 '--out', str(tmp_path / 'out')])
    assert code == 0
    assert 'manifest:' in capsys.readouterr().out
    assert (tmp_path / 'out' / 'dataset' / 'manifest.jsonl').exists()


def test_missing_input_exit_code(tmp_path, capsys):
    code = main(['build-dataset', '--quiet', '--raster', str(tmp_path / 'none.tif'),
                 '--truth', str(tmp_path / 'none.geojson'), '--out', str(tmp_path / 'out')])
    assert code == 2
    line = last_error_line(capsys)
    assert line.startswith('error MISSING_INPUT: ')
    assert 'none.tif' in line


def test_invalid_parameter_exit_code(tmp_path, capsys):
    assert main(['train', '--quiet', '--epochs', '0', '--out', str(tmp_path)]) == 2
    assert last_error_line(capsys).startswith('error CONFIG_ERROR: ')


def test_synth_overflow_exit_code(tmp_path, capsys):
    assert main(['synth', '--quiet', '--out', str(tmp_path), '--width', '32', '--height', '32']) == 2
    assert last_error_line(capsys).startswith('error PATCH_OVERFLOW: ')


def test_predict_manifest_only(tmp_path, capsys):
    scene = tmp_path / 'scene'
    assert main(['synth', '--quiet', '--out', str(scene), '--width', '64', '--height', '64',
                 '--patches', '1', '--seed', '3']) == 0
    code = main(['predict', '--quiet', '--manifest-only', '--raster', str(scene / 'synthetic.tif'),
                 '--tile-size', '16', '--stride', '16', '--out', str(tmp_path / 'out')])
    assert code == 0
    assert '(16 tiles)' in capsys.readouterr().out
    assert (tmp_path / 'out' / 'predict' / 'manifest.jsonl').exists()


def test_unknown_command(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(['bogus'])
    assert excinfo.value.code == 2
    err = capsys.readouterr().err
    assert len(err.strip().splitlines()) == 1
    assert err.startswith('error CONFIG_ERROR: ')


def test_bad_flag_value_is_one_line(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(['train', '--epochs', 'many'])
    assert excinfo.value.code == 2
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1
    assert lines[0].startswith('error CONFIG_ERROR: ')
    assert '--epochs' in lines[0]
