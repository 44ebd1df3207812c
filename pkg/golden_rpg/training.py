"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

Adapter training: seeded validation split, shuffled mini-batches, per-sample
gradients summed then averaged, global-norm clipping, AdamW with a per-step
cosine learning rate and the per-epoch lambda_alpha schedule. Only the blocks
of the configured variant are updated; the surrogate stays frozen.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .adapter import FeatureMoments, GoldenRPGModel
from .config import RunConfig
from .errors import CorpusError, NonFiniteError, TrainingAborted
from .losses import LossBreakdown, lambda_alpha_schedule, total_loss
from .optim import LrSchedule, OptimState, adamw_step, clip_grad_norm, cosine_lr
from .persistence import Checkpoint, checkpoint_from_model, save_checkpoint, warm_start
from .progress_dialog import ProgressDialog
from .synthetic import Corpus, TrainingRecord
from .tensor import Tensor, forward_backward, no_grad

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "mse", "rank", "div", "alpha_loss", "mean_alpha", "lr",
                   "lambda_alpha"]


@dataclass
class TrainHistory:
    rows: List[Dict[str, float]] = field(default_factory=list)
    initial_mean_alpha: float = float("nan")

    def append(self, row: Dict[str, float]):
        self.rows.append({column: row[column] for column in HISTORY_COLUMNS})

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> List[float]:
        return [row[name] for row in self.rows]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=HISTORY_COLUMNS)

    def save_csv(self, path: str):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def load_csv(cls, path: str) -> "TrainHistory":
        frame = pd.read_csv(path, float_precision="round_trip")
        history = cls()
        for row in frame.to_dict(orient="records"):
            row["epoch"] = int(row["epoch"])
            history.append(row)
        return history


@dataclass(frozen=True)
class TrainResult:
    model: GoldenRPGModel
    history: TrainHistory
    checkpoint: Checkpoint


def split_records(records: Sequence[TrainingRecord], val_fraction: float,
                  seed: int) -> Tuple[List[TrainingRecord], List[TrainingRecord]]:
    """Seeded shuffle, the first round(n * val_fraction) records held out; at least one record trains."""
    order = np.random.default_rng([seed, 0]).permutation(len(records))
    held = min(int(round(len(records) * val_fraction)), len(records) - 1)
    validation = [records[i] for i in sorted(order[:held])]
    training = [records[i] for i in sorted(order[held:])]
    return training, validation


def batches(count: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(count)
    return [order[start:start + batch_size] for start in range(0, count, batch_size)]


class Trainer:
    def __init__(self, config: RunConfig, corpus: Corpus, warm: Optional[Checkpoint] = None,
                 abort_path: Optional[str] = None) -> None:
        if not corpus.records:
            raise CorpusError("Cannot train on an empty corpus.")
        if corpus.stats.delta_mean <= 0:
            raise CorpusError(f"Mean candidate gap {corpus.stats.delta_mean} is not positive; "
                              "the corpus is degenerate.")
        self.config = config
        self.corpus = corpus
        self.abort_path = abort_path
        settings = config.train
        self.train_records, self.val_records = split_records(corpus.records, settings.val_fraction, settings.seed)
        moments = FeatureMoments.fit([r.prompt.features().as_array() for r in self.train_records])
        self.model = GoldenRPGModel(config.adapter, config.surrogate, config.dims, settings.variant, moments)
        if warm is not None:
            warm_start(self.model, warm)
        self.masks = {id(r): r.prompt.hard_masks() for r in corpus.records}
        self.params = {name: tensor.numpy() for name, tensor in self.model.trainable_parameters().items()}
        self.state = OptimState(lr=settings.lr, weight_decay=settings.weight_decay)
        steps_per_epoch = math.ceil(len(self.train_records) / settings.batch_size)
        self.schedule = LrSchedule(settings.lr, settings.epochs * steps_per_epoch)
        self.rng = np.random.default_rng([settings.seed, 1])
        self.epoch = 0
        self.step = 0
        self.last_good = checkpoint_from_model(self.model, config, 0, corpus.stats)
        logger.info("Training %s on %d records (%d held out), %d trainable parameters", settings.variant,
                    len(self.train_records), len(self.val_records), sum(p.size for p in self.params.values()))

    def _bind(self, tensors: Dict[str, Tensor]):
        self.model.bind(tensors)

    def _sampleLoss(self, record: TrainingRecord, lambda_alpha: float,
                    rng: Optional[np.random.Generator]) -> Tuple[LossBreakdown, float]:
        output = self.model.forward_prompt(record.prompt, record.z_t, rng)
        breakdown = total_loss(record, output, self.config.loss, self.corpus.stats.delta_mean, lambda_alpha,
                               self.config.adapter.alpha_max, self.masks[id(record)])
        return breakdown, output.alpha.item()

    def _abort(self, reason: str, record: TrainingRecord, extra: Optional[dict] = None):
        path = None
        if self.abort_path:
            save_checkpoint(self.last_good, self.abort_path)
            path = self.abort_path
        diagnostics = {"epoch": self.epoch, "step": self.step, "prompt_id": record.prompt.prompt_id,
                       "last_good_epoch": self.last_good.epoch}
        diagnostics.update(extra or {})
        logger.error("Training aborted at epoch %d step %d: %s", self.epoch, self.step, reason)
        raise TrainingAborted(f"Training aborted at epoch {self.epoch}, step {self.step}: {reason}", path,
                              diagnostics)

    def train_step(self, records: Sequence[TrainingRecord], lambda_alpha: float) -> List[Tuple[LossBreakdown, float]]:
        """One optimizer step over a batch; returns each sample's loss breakdown and alpha."""
        self.model.train()
        summed = {name: np.zeros_like(value) for name, value in self.params.items()}
        results = []
        for record in records:
            sample_rng = np.random.default_rng([self.config.train.seed, 2, self.step, len(results)])
            captured = {}

            def expression(tensors: Dict[str, Tensor]) -> Tensor:
                self._bind(tensors)
                captured["result"] = self._sampleLoss(record, lambda_alpha, sample_rng)
                return captured["result"][0].total

            tensors = {name: Tensor(value, requires_grad=True) for name, value in self.params.items()}
            try:
                value, grads = forward_backward(expression, tensors)
            except NonFiniteError as error:
                self._abort(str(error), record)
            if not np.isfinite(value.item()) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                self._abort("non-finite loss or gradient", record, {"loss": value.item()})
            for name, grad in grads.items():
                summed[name] = summed[name] + grad
            results.append(captured["result"])
        averaged = {name: grad / len(records) for name, grad in summed.items()}
        clipped, norm = clip_grad_norm(averaged, self.config.train.grad_clip)
        lr = cosine_lr(self.step, self.schedule)
        self.params, self.state = adamw_step(self.params, clipped, self.state, lr)
        self._bind({name: Tensor(value, requires_grad=True) for name, value in self.params.items()})
        logger.debug("step %d lr %.3g grad norm %.4g", self.step, lr, norm)
        self.step += 1
        return results

    def evaluate(self, records: Sequence[TrainingRecord], lambda_alpha: float) -> Tuple[float, float]:
        """Mean total loss and mean alpha in evaluation mode."""
        if not records:
            return float("nan"), float("nan")
        self.model.eval()
        losses, alphas = [], []
        with no_grad():
            for record in records:
                try:
                    breakdown, alpha = self._sampleLoss(record, lambda_alpha, None)
                except NonFiniteError as error:
                    self._abort(str(error), record)
                losses.append(breakdown.total.item())
                alphas.append(alpha)
        return float(np.mean(losses)), float(np.mean(alphas))

    def run(self) -> TrainResult:
        settings = self.config.train
        history = TrainHistory()
        _, history.initial_mean_alpha = self.evaluate(self.train_records, 0.0)
        logger.info("Initial mean alpha %.4f", history.initial_mean_alpha)
        with ProgressDialog("Training " + settings.variant, 0, settings.epochs) as progress:
            for epoch in range(settings.epochs):
                self.epoch = epoch
                lambda_alpha = lambda_alpha_schedule(epoch, settings.epochs, settings.warmup_epochs,
                                                     self.config.loss.lambda_alpha)
                lr = cosine_lr(self.step, self.schedule)
                results = []
                for indices in batches(len(self.train_records), settings.batch_size, self.rng):
                    results.extend(self.train_step([self.train_records[i] for i in indices], lambda_alpha))
                val_loss, _ = self.evaluate(self.val_records, lambda_alpha)
                parts = [breakdown.as_dict() for breakdown, _ in results]
                row = {"epoch": epoch,
                       "train_loss": float(np.mean([p["total"] for p in parts])),
                       "val_loss": val_loss,
                       "mse": float(np.mean([p["mse"] for p in parts])),
                       "rank": float(np.mean([p["rank"] for p in parts])),
                       "div": float(np.mean([p["div"] for p in parts])),
                       "alpha_loss": float(np.mean([p["alpha_loss"] for p in parts])),
                       "mean_alpha": float(np.mean([alpha for _, alpha in results])),
                       "lr": lr,
                       "lambda_alpha": lambda_alpha}
                history.append(row)
                self.last_good = checkpoint_from_model(self.model, self.config, epoch + 1, self.corpus.stats)
                logger.info("epoch %d train %.6g val %.6g mean alpha %.4f", epoch, row["train_loss"], val_loss,
                            row["mean_alpha"])
                progress.setLabel(f"loss {row['train_loss']:.4g}")
                progress.increment()
        self.model.eval()
        return TrainResult(self.model, history, self.last_good)


def train(config: RunConfig, corpus: Corpus, warm: Optional[Checkpoint] = None,
          abort_path: Optional[str] = None) -> TrainResult:
    """
    Trains the configured variant. With a warm-start checkpoint the FiLM and RCA
    blocks are copied from it, the Confidence Head starts fresh and the epoch
    clock (lambda_alpha warm-up and learning-rate cosine) starts over.
    """
    return Trainer(config, corpus, warm, abort_path).run()
