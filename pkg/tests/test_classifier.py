import math

import numpy as np
import pytest

from config.settings import TileSpec, TrainConfig
from src.settlements.classifier import (FEATURE_DIM, ModelParams, ModelScorer, ScoreFileScorer, bce_gradient,
                                        bce_loss, featurize, load_score_file, predict_proba, predict_proba_many,
                                        score_tiles, squares_from_scores, train_sgd, write_score_file)
from src.settlements.dataset_builder import build_manifest, enumerate_windows, unlabeled_records
from src.settlements.errors import MissingScoreError, ParseError, SingleClassDatasetError, TileTooSmallError
from src.settlements.tile_store import RasterTileSource


def constant_tile(value, size=4):
    return np.full((size, size, 3), value, dtype=np.uint8)


def zero_params(weights=None, bias=0.0):
    w = np.zeros(FEATURE_DIM) if weights is None else np.asarray(weights, dtype=np.float64)
    return ModelParams(w, bias, np.zeros(FEATURE_DIM), np.ones(FEATURE_DIM))


def relative_error(a, b, eps=1e-3):
    return abs(a - b) / max(abs(a), abs(b), eps)


def clustered_features(rng, n=40, gap=4.0):
    """Two well separated Gaussian clusters along every feature dimension"""
    pos = rng.normal(gap, 1.0, size=(n, FEATURE_DIM))
    neg = rng.normal(-gap, 1.0, size=(n, FEATURE_DIM))
    return np.vstack([pos, neg]), np.r_[np.ones(n), np.zeros(n)]


class TestFeaturize:
    def test_black_tile(self):
        f = featurize(constant_tile(0))
        assert f.shape == (FEATURE_DIM,)
        np.testing.assert_array_equal(f[:9], 0.0)
        assert f[9] == 1.0
        assert f[10:].sum() == 0.0

    def test_white_tile(self):
        f = featurize(constant_tile(255))
        np.testing.assert_array_equal(f[:3], 1.0)
        np.testing.assert_array_equal(f[3:9], 0.0)
        assert f[-1] == 1.0

    def test_checkerboard(self):
        values = np.array([[0, 255], [255, 0]], dtype=np.uint8)
        f = featurize(np.repeat(values[..., None], 3, axis=2))
        np.testing.assert_allclose(f[:3], 0.5)
        np.testing.assert_allclose(f[3:6], 0.5)
        np.testing.assert_allclose(f[6:9], 2.0)
        assert f[9] == 0.5 and f[-1] == 0.5

    def test_flip_invariance(self, rng):
        for _ in range(10):
            tile = rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
            f = featurize(tile)
            np.testing.assert_array_equal(featurize(tile[:, ::-1]), f)
            np.testing.assert_array_equal(featurize(tile[::-1]), f)
            np.testing.assert_array_equal(featurize(tile[::-1, ::-1]), f)

    def test_histogram_sums_to_one(self, rng):
        f = featurize(rng.integers(0, 256, size=(9, 9, 3), dtype=np.uint8))
        assert math.isclose(f[9:].sum(), 1.0)

    @pytest.mark.parametrize("shape", [(1, 4, 3), (4, 1, 3)])
    def test_tile_too_small(self, shape):
        with pytest.raises(TileTooSmallError):
            featurize(np.zeros(shape, dtype=np.uint8))


class TestLoss:
    def test_gradient_matches_finite_differences(self, rng):
        x = rng.normal(size=(20, FEATURE_DIM))
        y = (rng.random(20) > 0.5).astype(np.float64)
        l2 = 0.01
        for _ in range(20):
            w = rng.normal(size=FEATURE_DIM)
            b = float(rng.normal())
            dw, db = bce_gradient(w, b, x, y, l2)
            h = 1e-5
            for k in range(FEATURE_DIM):
                e = np.zeros(FEATURE_DIM)
                e[k] = h
                numeric = (bce_loss(w + e, b, x, y, l2) - bce_loss(w - e, b, x, y, l2)) / (2 * h)
                assert relative_error(numeric, dw[k]) < 1e-6
            numeric_b = (bce_loss(w, b + h, x, y, l2) - bce_loss(w, b - h, x, y, l2)) / (2 * h)
            assert relative_error(numeric_b, db) < 1e-6

    def test_loss_at_zero_is_log_two(self, rng):
        x = rng.normal(size=(10, FEATURE_DIM))
        y = np.r_[np.ones(5), np.zeros(5)]
        assert math.isclose(bce_loss(np.zeros(FEATURE_DIM), 0.0, x, y, 0.0), math.log(2))


class TestTraining:
    def test_separable_clusters(self, rng):
        x, y = clustered_features(rng)
        result = train_sgd(x, y, TrainConfig(learning_rate=0.1, epochs=50, batch_size=8), seed=3)
        p = predict_proba_many(result.params, x)
        assert np.mean((p >= 0.5) == (y == 1)) == 1.0
        assert len(result.loss_history) == 50

    def test_same_seed_same_params(self, rng):
        x, y = clustered_features(rng, n=15, gap=0.5)
        cfg = TrainConfig(learning_rate=0.05, epochs=10, batch_size=4)
        a = train_sgd(x, y, cfg, seed=11).params
        b = train_sgd(x, y, cfg, seed=11).params
        np.testing.assert_array_equal(a.weights, b.weights)
        assert a.bias == b.bias

    def test_full_batch_loss_never_increases(self, rng):
        x, y = clustered_features(rng, n=25, gap=0.3)
        result = train_sgd(x, y, TrainConfig(learning_rate=1e-3, epochs=30, batch_size=len(y)), seed=0)
        history = np.array(result.loss_history)
        assert np.all(np.diff(history) <= 1e-12)

    @pytest.mark.parametrize("labels", [np.ones(6), np.zeros(6), np.array([])])
    def test_single_class(self, labels):
        with pytest.raises(SingleClassDatasetError):
            train_sgd(np.zeros((len(labels), FEATURE_DIM)), labels, TrainConfig(epochs=1), seed=0)

    def test_loss_frame(self, rng):
        x, y = clustered_features(rng, n=5)
        frame = train_sgd(x, y, TrainConfig(epochs=3), seed=0).loss_frame()
        assert list(frame.columns) == ['epoch', 'loss']
        assert list(frame['epoch']) == [1, 2, 3]


class TestPredict:
    def test_zero_params_give_half(self, rng):
        assert predict_proba(zero_params(), rng.normal(size=FEATURE_DIM)) == 0.5

    def test_large_bias(self):
        assert predict_proba(zero_params(bias=20.0), np.zeros(FEATURE_DIM)) > 0.999999

    def test_single_weight(self):
        w = np.zeros(FEATURE_DIM)
        w[0] = 1.0
        f = np.zeros(FEATURE_DIM)
        f[0] = 2.0
        assert math.isclose(predict_proba(zero_params(w), f), 0.880797, abs_tol=1e-6)

    def test_monotone_in_positive_weight_feature(self):
        w = np.zeros(FEATURE_DIM)
        w[4] = 0.7
        params = zero_params(w, bias=-0.3)
        probs = []
        for v in np.linspace(-3, 3, 13):
            f = np.zeros(FEATURE_DIM)
            f[4] = v
            probs.append(predict_proba(params, f))
        assert all(a < b for a, b in zip(probs, probs[1:]))

    def test_batch_matches_single(self, rng):
        params = ModelParams(rng.normal(size=FEATURE_DIM), 0.2, rng.normal(size=FEATURE_DIM),
                             rng.random(FEATURE_DIM) + 0.5)
        x = rng.normal(size=(6, FEATURE_DIM))
        batch = predict_proba_many(params, x)
        for row, p in zip(x, batch):
            assert math.isclose(predict_proba(params, row), p, rel_tol=1e-12)


class TestModelFile:
    def test_save_load_exact(self, tmp_path, rng):
        params = ModelParams(rng.normal(size=FEATURE_DIM), float(rng.normal()),
                             rng.normal(size=FEATURE_DIM), rng.random(FEATURE_DIM) + 0.1)
        path = tmp_path / 'model.json'
        params.save(path)
        loaded = ModelParams.load(path)
        np.testing.assert_array_equal(loaded.weights, params.weights)
        np.testing.assert_array_equal(loaded.feature_mean, params.feature_mean)
        np.testing.assert_array_equal(loaded.feature_std, params.feature_std)
        assert loaded.bias == params.bias

    def test_rejects_wrong_format(self):
        with pytest.raises(ParseError):
            ModelParams.from_dict({'format': 'other', 'version': 1})

    def test_rejects_wrong_length(self):
        data = zero_params().to_dict()
        data['weights'] = [0.0, 1.0]
        with pytest.raises(ParseError):
            ModelParams.from_dict(data)


class TestScoreFile:
    def test_round_trip_exact(self, tmp_path):
        scores = {'r000000c000000': 0.1, 'r000000c000016': 1 / 3, 'r000016c000000': 1.0}
        path = tmp_path / 'scores.csv'
        write_score_file(scores, path)
        assert load_score_file(path) == scores

    def test_empty_file(self, tmp_path):
        path = tmp_path / 'scores.csv'
        path.write_text('', encoding='utf-8')
        assert load_score_file(path) == {}

    @pytest.mark.parametrize("body", [
        "tile,probability\na,0.5\n",
        "tile_id,probability\na,0.5\na,0.6\n",
        "tile_id,probability\na,1.5\n",
        "tile_id,probability\na,high\n",
    ])
    def test_malformed(self, tmp_path, body):
        path = tmp_path / 'scores.csv'
        path.write_text(body, encoding='utf-8')
        with pytest.raises(ParseError):
            load_score_file(path)


class TestScorers:
    @pytest.fixture
    def manifest(self, make_raster):
        raster = make_raster(8, 8)
        windows = enumerate_windows(8, 8, TileSpec(4, 4))
        return raster, build_manifest(raster, TileSpec(4, 4), unlabeled_records(windows, raster.transform))

    def test_score_file_scorer(self, manifest):
        raster, m = manifest
        scores = {r.tile_id: 0.25 * k for k, r in enumerate(m.entries)}
        squares = score_tiles(ScoreFileScorer(scores), m, RasterTileSource(raster))
        assert [s.probability for s in squares] == [0.0, 0.25, 0.5, 0.75]
        assert [s.grid_index for s in squares] == [(0, 0), (1, 0), (0, 1), (1, 1)]
        assert [s.footprint for s in squares] == [r.footprint for r in m.entries]

    def test_missing_score(self, manifest):
        raster, m = manifest
        scores = {m.entries[0].tile_id: 0.5}
        with pytest.raises(MissingScoreError):
            ScoreFileScorer(scores).score(m, RasterTileSource(raster))

    def test_score_out_of_range(self, manifest):
        raster, m = manifest
        scores = {r.tile_id: 2.0 for r in m.entries}
        with pytest.raises(ParseError):
            ScoreFileScorer(scores).score(m, RasterTileSource(raster))

    def test_unknown_tile_id(self, manifest):
        _, m = manifest
        with pytest.raises(ParseError):
            squares_from_scores(m, {'nope': 0.5})

    def test_model_scorer_matches_predict_proba(self, manifest, rng):
        raster, m = manifest
        source = RasterTileSource(raster)
        params = ModelParams(rng.normal(size=FEATURE_DIM), -0.1, rng.normal(size=FEATURE_DIM) * 0.1,
                             rng.random(FEATURE_DIM) + 0.5)
        scores = ModelScorer(params, threads=2).score(m, source)
        for record in m.entries:
            expected = predict_proba(params, featurize(source.read(record)))
            assert math.isclose(scores[record.tile_id], expected, rel_tol=1e-12)
