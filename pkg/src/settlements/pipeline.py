"""Pipeline commands: build-dataset, train, predict, postprocess, evaluate, synth, run-all."""
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Set, Union

import numpy as np
import pandas as pd

from config.settings import PipelineConfig
from .classifier import (ModelParams, ModelScorer, ScoreFileScorer, features_for, load_score_file,
                         score_tiles, split_metrics, squares_from_scores, train_sgd, write_score_file)
from .dataset_builder import (augment, build_manifest, enumerate_windows, extract_pixels, label_tiles,
                              split_train_val, undersample_negatives, unlabeled_records)
from .errors import ConfigError, EmptyMatrixError, MissingInputError, SettlementMapError, StageError
from .evaluator import ConfusionMatrix, EvalReport, cohens_kappa, evaluate, precision_recall_f1
from .geo_core import PolygonGeom
from .geo_io import (Feature, FeatureCollection, load_feature_collection, load_raster, load_tile_manifest,
                     write_feature_collection, write_tile_manifest)
from .postprocess import run_postprocess
from .synth import SynthSpec, generate, write_scene
from .tile_store import RasterTileSource, TileStore


def df_to_markdown(df: Optional[pd.DataFrame]) -> str:
    if df is None or df.empty:
        return "_No data available._"
    try:
        return df.to_markdown(index=False)
    except ImportError:
        return "```\n" + df.to_string(index=False) + "\n```"


@dataclass
class BuildOutcome:
    manifest_path: Path
    tiles_dir: Path
    class_counts: pd.DataFrame
    windows: int
    positives: int
    stored_tiles: int


@dataclass
class TrainOutcome:
    model_path: Path
    log_path: Path
    train: Dict[str, float]
    val: Dict[str, float]
    final_loss: float


@dataclass
class PredictOutcome:
    manifest_path: Path
    scores_path: Path
    squares_path: Path
    tiles: int
    exported_squares: int


@dataclass
class PostprocessOutcome:
    path: Path
    features: int
    block_mode: bool


@dataclass
class EvaluateOutcome:
    report_path: Path
    report: EvalReport


@dataclass
class RunSummary:
    build: BuildOutcome
    train: TrainOutcome
    predict: PredictOutcome
    postprocess: PostprocessOutcome
    evaluate: EvaluateOutcome
    outputs: List[Path] = field(default_factory=list)


class PipelineRunner:
    """Runs pipeline commands against one configuration and output directory"""

    def __init__(self, config: PipelineConfig):
        self.config = config.validate()
        self.logger = logging.getLogger(self.__class__.__name__)

    # -- layout ---------------------------------------------------------

    @property
    def out(self) -> Path:
        return self.config.output_dir

    @property
    def dataset_dir(self) -> Path:
        return self.out / 'dataset'

    @property
    def dataset_manifest(self) -> Path:
        return self.dataset_dir / 'manifest.jsonl'

    @property
    def model_path(self) -> Path:
        return Path(self.config.paths.model) if self.config.paths.model else self.out / 'model' / 'model.json'

    @property
    def predict_dir(self) -> Path:
        return self.out / 'predict'

    @property
    def scores_path(self) -> Path:
        return self.predict_dir / 'scores.csv'

    @property
    def postprocess_path(self) -> Path:
        name = 'blocks.geojson' if self.config.postprocess.block_filter else 'regions.geojson'
        return self.out / 'postprocess' / name

    @property
    def report_path(self) -> Path:
        return self.out / 'evaluate' / 'report.json'

    @property
    def workers(self) -> int:
        return self.config.threads or (os.cpu_count() or 1)

    # -- helpers --------------------------------------------------------

    @contextmanager
    def _stage(self, name: str):
        self.logger.info(f"Stage '{name}' started")
        try:
            yield
        except StageError:
            raise
        except SettlementMapError as e:
            self.logger.error(f"Stage '{name}' failed: {e}")
            raise StageError(name, e) from e
        self.logger.info(f"Stage '{name}' finished")

    def _input(self, value: Optional[str], what: str) -> Path:
        if not value:
            raise ConfigError(f"No {what} path configured")
        path = Path(value)
        if not path.exists():
            raise MissingInputError(f"{what} not found: {path}")
        return path

    # -- commands -------------------------------------------------------

    def build_dataset(self) -> BuildOutcome:
        """enumerate, label, split, undersample (train), augment (train), persist"""
        cfg = self.config
        with self._stage('load inputs'):
            raster = load_raster(self._input(cfg.paths.raster, 'raster'))
            truth = load_feature_collection(self._input(cfg.paths.truth, 'truth polygons'))

        with self._stage('label'):
            windows = enumerate_windows(raster.width, raster.height, cfg.tiles)
            records = label_tiles(windows, raster.transform, truth, self.workers)

        with self._stage('split'):
            records = split_train_val(records, cfg.val_fraction, cfg.stage_seed('split'))

        with self._stage('undersample'):
            undersample = cfg.undersample
            if undersample.seed is None:
                undersample = replace(undersample, seed=cfg.stage_seed('undersample'))
            kept = {r.tile_id for r in undersample_negatives([r for r in records if r.split == 'train'],
                                                             undersample)}
            records = [r for r in records if r.split == 'val' or r.tile_id in kept]

        with self._stage('augment'):
            store = TileStore(self.dataset_dir / 'tiles')
            entries = []

            def persisted():
                for tile in augment(records, lambda r: extract_pixels(raster, r.window)):
                    entries.append(tile.record)
                    yield tile

            stored = store.write_all(persisted())
            manifest = build_manifest(raster, cfg.tiles, entries)
            write_tile_manifest(manifest, self.dataset_manifest)

        counts = manifest.class_counts()
        self.logger.info(f"Dataset class counts:\n{counts.to_string(index=False)}")
        return BuildOutcome(self.dataset_manifest, store.root, counts, len(windows),
                            sum(1 for w in records if w.label), stored)

    def train(self) -> TrainOutcome:
        """Fit the baseline on the train split; validation tiles only measure"""
        cfg = self.config
        with self._stage('load dataset'):
            manifest = load_tile_manifest(self._input(str(self.dataset_manifest), 'dataset manifest'))
            store = TileStore(self.dataset_dir / 'tiles')
            train_records = [r for r in manifest.entries if r.split == 'train']
            val_records = [r for r in manifest.entries if r.split == 'val']
            x_train = features_for(train_records, store)
            y_train = np.array([bool(r.label) for r in train_records], dtype=np.float64)
            x_val = features_for(val_records, store)
            y_val = np.array([bool(r.label) for r in val_records], dtype=np.float64)

        with self._stage('train'):
            result = train_sgd(x_train, y_train, cfg.train, seed=cfg.stage_seed('train'))
            result.params.save(self.model_path)
            log_path = self.model_path.parent / 'training_log.csv'
            result.loss_frame().to_csv(log_path, index=False, float_format='%.17g', lineterminator='\n')

        train_metrics = split_metrics(result.params, x_train, y_train)
        val_metrics = split_metrics(result.params, x_val, y_val)
        self.logger.info(f"Train loss {train_metrics['loss']:.4f} accuracy {train_metrics['accuracy']:.4f}; "
                         f"val loss {val_metrics['loss']:.4f} accuracy {val_metrics['accuracy']:.4f}")
        return TrainOutcome(self.model_path, log_path, train_metrics, val_metrics, result.loss_history[-1])

    def predict(self, raster_path: Optional[str] = None, scores_path: Optional[str] = None,
                manifest_only: bool = False) -> PredictOutcome:
        """Score every window of the prediction raster and export the scored squares.

        With `manifest_only` only the tile manifest is written; no model or score file is needed.
        """
        cfg = self.config
        manifest_path = self.predict_dir / 'manifest.jsonl'
        squares_path = self.predict_dir / 'squares.geojson'
        with self._stage('tile manifest'):
            raster = load_raster(self._input(raster_path or cfg.paths.predict_raster, 'prediction raster'))
            windows = enumerate_windows(raster.width, raster.height, cfg.tiles)
            manifest = build_manifest(raster, cfg.tiles, unlabeled_records(windows, raster.transform))
            write_tile_manifest(manifest, manifest_path)

        if manifest_only:
            self.logger.info(f"Wrote tile manifest with {len(manifest)} tiles; scoring skipped")
            return PredictOutcome(manifest_path, self.scores_path, squares_path, len(manifest), 0)

        with self._stage('load scorer'):
            external = scores_path or cfg.paths.scores
            if external:
                scorer = ScoreFileScorer.from_file(self._input(external, 'score file'))
            else:
                scorer = ModelScorer(ModelParams.load(self._input(str(self.model_path), 'model')), self.workers)

        with self._stage('predict'):
            squares = score_tiles(scorer, manifest, RasterTileSource(raster))
            write_score_file({s.tile_id: s.probability for s in squares}, self.scores_path)
            exported = [s for s in squares if s.probability >= cfg.export_min_probability]
            collection = FeatureCollection(
                [Feature(PolygonGeom.from_rect(s.footprint),
                         {'tile_id': s.tile_id, 'probability': s.probability,
                          'grid_i': s.grid_index[0], 'grid_j': s.grid_index[1]})
                 for s in exported],
                raster.transform.crs_tag,
            )
            write_feature_collection(collection, squares_path)

        self.logger.info(f"Scored {len(squares)} tiles with {scorer.describe()}, exported {len(exported)} squares")
        return PredictOutcome(manifest_path, self.scores_path, squares_path, len(squares), len(exported))

    def postprocess(self, scores_path: Optional[str] = None) -> PostprocessOutcome:
        """Median filter, dissolve and optional block filter over a score file"""
        cfg = self.config
        with self._stage('load inputs'):
            blocks = None
            if cfg.postprocess.block_filter:
                blocks = load_feature_collection(self._input(cfg.paths.blocks, 'blocks'))
            manifest = load_tile_manifest(self._input(str(self.predict_dir / 'manifest.jsonl'),
                                                      'prediction manifest'))
            source = scores_path or cfg.paths.scores or str(self.scores_path)
            scores = load_score_file(self._input(source, 'score file'))

        with self._stage('postprocess'):
            squares = squares_from_scores(manifest, scores)
            collection = run_postprocess(squares, cfg.postprocess, blocks, manifest.transform.crs_tag)
            write_feature_collection(collection, self.postprocess_path)

        return PostprocessOutcome(self.postprocess_path, len(collection), cfg.postprocess.block_filter)

    def evaluate(self, predicted_path: Optional[str] = None, truth_path: Optional[str] = None) -> EvaluateOutcome:
        """Pixel-level agreement of the predicted map with the evaluation truth"""
        cfg = self.config
        with self._stage('load inputs'):
            raster = load_raster(self._input(cfg.paths.predict_raster, 'prediction raster'))
            predicted_source = predicted_path or cfg.paths.predicted or str(self.postprocess_path)
            predicted = load_feature_collection(self._input(predicted_source, 'predicted map'))
            truth = load_feature_collection(self._input(truth_path or cfg.paths.eval_truth, 'evaluation truth'))

        with self._stage('evaluate'):
            report = evaluate(predicted, truth, raster.transform, raster.width, raster.height,
                              cfg.eval_resolution)
            report.write(self.report_path)

        self.logger.info(f"Evaluation report:\n{report.render()}")
        return EvaluateOutcome(self.report_path, report)

    def run_all(self) -> RunSummary:
        """build, train, predict, postprocess, evaluate; files created by a failed run are removed"""
        before = _snapshot(self.out)
        try:
            build = self.build_dataset()
            trained = self.train()
            predicted = self.predict()
            post = self.postprocess()
            evaluated = self.evaluate(predicted_path=str(post.path))
        except Exception:
            removed = _remove_new(self.out, before)
            self.logger.error(f"Run aborted; removed {removed} partial output(s)")
            raise

        summary = RunSummary(build, trained, predicted, post, evaluated)
        summary.outputs = [build.manifest_path, build.tiles_dir, trained.model_path, trained.log_path,
                           predicted.manifest_path, predicted.scores_path, predicted.squares_path,
                           post.path, evaluated.report_path,
                           self.out / 'run_summary.md', self.out / 'run_summary.json']
        self.write_summary(summary)
        return summary

    def sweep_undersample(self, ratios: Sequence[float] = (4.0, 8.0)) -> pd.DataFrame:
        """Build and train at each undersampling ratio; tile-level metrics on the validation split"""
        rows = []
        sweep_dir = self.out / 'sweep'
        for ratio in ratios:
            cfg = self.config.with_overrides(out=str(sweep_dir / f"ratio_{ratio:g}"), undersample_ratio=ratio,
                                             model=str(sweep_dir / f"ratio_{ratio:g}" / 'model' / 'model.json'))
            runner = PipelineRunner(cfg)
            build = runner.build_dataset()
            trained = runner.train()

            manifest = load_tile_manifest(build.manifest_path)
            store = TileStore(build.tiles_dir)
            val = [r for r in manifest.entries if r.split == 'val']
            params = ModelParams.load(trained.model_path)
            scores = ModelScorer(params).score(replace(manifest, entries=val), store)
            predicted = np.array([scores[r.tile_id] >= 0.5 for r in val], dtype=bool)
            actual = np.array([bool(r.label) for r in val], dtype=bool)
            cm = ConfusionMatrix(int((predicted & actual).sum()), int((predicted & ~actual).sum()),
                                 int((~predicted & actual).sum()), int((~predicted & ~actual).sum()))
            try:
                kappa = cohens_kappa(cm)
            except EmptyMatrixError:
                kappa = float('nan')
            rates = precision_recall_f1(cm)

            train_entries = [r for r in manifest.entries if r.split == 'train' and r.augmentation == 'none']
            rows.append({
                'ratio': ratio,
                'train_positives': sum(1 for r in train_entries if r.label),
                'train_negatives': sum(1 for r in train_entries if not r.label),
                'val_loss': trained.val['loss'],
                'val_accuracy': trained.val['accuracy'],
                'val_kappa': kappa,
                'val_precision': rates.precision,
                'val_recall': rates.recall,
            })

        table = pd.DataFrame(rows)
        path = sweep_dir / 'undersample_sweep.csv'
        path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(path, index=False, float_format='%.17g', lineterminator='\n')
        self.logger.info(f"Undersampling sweep:\n{table.to_string(index=False)}")
        return table

    # -- reporting ------------------------------------------------------

    def generate_summary_report(self, summary: RunSummary) -> str:
        """Markdown summary of a full run"""
        report = summary.evaluate.report
        train = summary.train
        report_md = "# Settlement Mapping Run Summary\n\n"
        report_md += "## Summary Statistics\n"
        report_md += f"- Raster: {self.config.paths.raster}\n"
        report_md += f"- Prediction raster: {self.config.paths.predict_raster}\n"
        report_md += f"- Tile size / stride: {self.config.tiles.tile_size} / {self.config.tiles.stride} px\n"
        report_md += f"- Windows enumerated: {summary.build.windows}\n"
        report_md += f"- Tiles stored (after undersampling and augmentation): {summary.build.stored_tiles}\n"
        report_md += f"- Final training loss: {train.final_loss:.6f}\n"
        report_md += f"- Training accuracy: {train.train['accuracy']:.4f}\n"
        if train.val['tiles']:
            report_md += f"- Validation accuracy: {train.val['accuracy']:.4f}\n"
        report_md += f"- Scored squares: {summary.predict.tiles}\n"
        kind = 'blocks' if summary.postprocess.block_mode else 'regions'
        report_md += f"- Output {kind}: {summary.postprocess.features}\n"
        report_md += f"- Pixel-level kappa: {report.kappa:.4f}\n"
        report_md += f"- Area flagged for survey: {100 * report.flagged_fraction:.2f}%\n"

        report_md += "\n## Dataset Class Counts\n"
        report_md += df_to_markdown(summary.build.class_counts) + "\n"
        report_md += "\n## Evaluation\n"
        report_md += df_to_markdown(report.to_frame()) + "\n"
        report_md += "\n## Outputs\n"
        for path in summary.outputs:
            report_md += f"- {path}\n"
        return report_md

    def write_summary(self, summary: RunSummary) -> None:
        md_path = self.out / 'run_summary.md'
        md_path.write_text(self.generate_summary_report(summary), encoding='utf-8')
        data: Dict[str, Any] = {
            'windows': summary.build.windows,
            'stored_tiles': summary.build.stored_tiles,
            'train': summary.train.train,
            'val': summary.train.val,
            'final_loss': summary.train.final_loss,
            'scored_tiles': summary.predict.tiles,
            'output_features': summary.postprocess.features,
            'evaluation': summary.evaluate.report.to_dict(),
            'outputs': [str(p) for p in summary.outputs],
        }
        with open(self.out / 'run_summary.json', 'w', encoding='utf-8', newline='\n') as f:
            json.dump(data, f, indent=2, allow_nan=True)
            f.write('\n')
        self.logger.info(f"Run summary written to {md_path}")


def _snapshot(root: Path) -> Set[Path]:
    if not root.exists():
        return set()
    return {root} | set(root.rglob('*'))


def _remove_new(root: Path, before: Set[Path]) -> int:
    """Delete files and directories under root that were not present in `before`"""
    if not root.exists():
        return 0
    removed = 0
    created = sorted(_snapshot(root) - before, key=lambda p: len(p.parts), reverse=True)
    for path in created:
        if path.is_dir():
            if not any(path.iterdir()):
                path.rmdir()
                removed += 1
        else:
            path.unlink()
            removed += 1
    return removed


# Module-level entry points, one per command

def cmd_build_dataset(config: PipelineConfig) -> BuildOutcome:
    return PipelineRunner(config).build_dataset()


def cmd_train(config: PipelineConfig) -> TrainOutcome:
    return PipelineRunner(config).train()


def cmd_predict(config: PipelineConfig, raster: Optional[str] = None, scores: Optional[str] = None,
                manifest_only: bool = False) -> PredictOutcome:
    return PipelineRunner(config).predict(raster, scores, manifest_only)


def cmd_postprocess(config: PipelineConfig, scores: Optional[str] = None) -> PostprocessOutcome:
    return PipelineRunner(config).postprocess(scores)


def cmd_evaluate(config: PipelineConfig, predicted: Optional[str] = None,
                 truth: Optional[str] = None) -> EvaluateOutcome:
    return PipelineRunner(config).evaluate(predicted, truth)


def cmd_run_all(config: PipelineConfig) -> RunSummary:
    return PipelineRunner(config).run_all()


def cmd_sweep_undersample(config: PipelineConfig, ratios: Sequence[float] = (4.0, 8.0)) -> pd.DataFrame:
    return PipelineRunner(config).sweep_undersample(ratios)


def cmd_synth(spec: SynthSpec, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Generate a synthetic scene and write raster, truth and blocks"""
    paths = write_scene(generate(spec), out_dir)
    logging.getLogger(__name__).info(f"Synthetic scene written to {out_dir}")
    return paths
