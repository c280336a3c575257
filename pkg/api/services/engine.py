"""Training, generation and evaluation orchestration for the report engine."""

import json
import logging
import math
import time
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from torch.utils.data import DataLoader

from ..config import RunConfig
from ..errors import ContextLengthError, InvalidParameterError, TrainingDivergedError
from ..models.checkpoint import load_checkpoint, save_checkpoint
from ..models.lm_decoder import DecoderConfig, loss
from ..models.report_model import ContextImages, ReportGenerator
from ..models.vision_backbone import BackboneConfig, backbone_config
from .bench import bench_scan_vs_attention, save_bench, summary_table
from .context_retrieval import ContextIndex, build_index, epoch_stream, retrieve
from .data_pipeline import (
    Manifest,
    ReportDataset,
    SampleRecord,
    SyntheticConfig,
    collate_reports,
    generate_synthetic_dataset,
    load_manifest,
)
from .metrics import MetricReport, evaluate_corpus, load_results, save_report
from .prompt_assembly import PromptTokens, expected_prompt_length, get_template
from .text import Vocabulary

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"
RUN_LOG_NAME = "run_log.json"


@dataclass
class TrainResult:
    epoch_losses: List[float]
    checkpoint: Path
    steps: int
    final_loss: float = math.nan


@dataclass
class GeneratedReport:
    id: str
    hypothesis: str
    reference: str


class ReportEngine:
    """Owns the data, vocabulary, context index and model for one run."""

    def __init__(self, config: Optional[RunConfig] = None):
        self.config = config or RunConfig()
        self.manifest: Optional[Manifest] = None
        self.vocab: Optional[Vocabulary] = None
        self.prompt_tokens: Optional[PromptTokens] = None
        self.index: Optional[ContextIndex] = None
        self.model: Optional[ReportGenerator] = None
        self.datasets: Dict[str, ReportDataset] = {}
        self.step_log: List[Dict] = []

    # setup

    @property
    def root(self) -> Path:
        return self.config.data.manifest_path.parent

    def load_data(self) -> Manifest:
        path = self.config.data.manifest_path
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        self.manifest = load_manifest(path)
        logger.info(f"Loaded {len(self.manifest.records)} records from {path}")
        return self.manifest

    def _dataset(self, split: str) -> ReportDataset:
        if split not in self.datasets:
            self.datasets[split] = ReportDataset(
                self.manifest.split(split), self.root, self.vocab, self.config.data.image_size
            )
        return self.datasets[split]

    def prepare(self) -> None:
        """Manifest, vocabulary, prompt tokens, context index and a freshly initialised model."""
        cfg = self.config
        if self.manifest is None:
            self.load_data()
        train = self.manifest.split("train")
        if not train:
            raise InvalidParameterError("the training split is empty")
        template = get_template(cfg.prompt.template, cfg.prompt.template_file)
        self.vocab = Vocabulary.build([r.report for r in train] + template.texts())
        self.prompt_tokens = PromptTokens.from_template(template, self.vocab)
        self._build_index()
        self._size_context_window()
        torch.manual_seed(cfg.train.seed)
        self.model = ReportGenerator(
            self._backbone_config(),
            self._decoder_config(len(self.vocab)),
            self.prompt_tokens,
            residual_stage=cfg.context.residual_stage,
            freeze_backbone=cfg.model.freeze_backbone,
        )

    def _size_context_window(self) -> None:
        """Fill in or check the decoder window against the longest prompt plus the longest report or decode."""
        cfg = self.config
        tokens, visual = self.prompt_tokens, self._backbone_config().num_tokens
        prompt = expected_prompt_length(0, 0, len(tokens.pre_plain), visual, len(tokens.post))
        if cfg.context.enabled:
            prompt = max(
                prompt,
                expected_prompt_length(
                    cfg.context.n_pairs, len(tokens.disease), len(tokens.pre_context), visual, len(tokens.post)
                ),
            )
        report = max(len(self.vocab.encode(r.report, add_eos=True)) for r in self.manifest.records)
        required = prompt + max(report, cfg.generate.max_len + 1)
        window = cfg.model.context_window
        if window is None:
            model = cfg.model.model_copy(update={"context_window": required})
            self.config = cfg.model_copy(update={"model": model})
            logger.info(f"Decoder context window sized to {required} ({prompt} prompt positions)")
        elif window < required:
            raise ContextLengthError(
                f"context window {window} is shorter than the {required} positions this run needs "
                f"({prompt} prompt, {report} longest report, {cfg.generate.max_len} decode steps)"
            )

    def _build_index(self) -> None:
        ctx = self.config.context
        if ctx.enabled:
            self.index = build_index(self.manifest.records, ctx.strategy, ctx.seed, ctx.keywords)

    def _backbone_config(self) -> BackboneConfig:
        m = self.config.model
        return backbone_config(
            m.backbone, image_size=self.config.data.image_size, block_kind=m.block_kind, scan_mode=m.scan_mode
        )

    def _decoder_config(self, vocab_size: int) -> DecoderConfig:
        m = self.config.model
        return DecoderConfig(
            vocab_size=vocab_size,
            embed_dim=m.embed_dim,
            n_layers=m.decoder_layers,
            d_state=m.decoder_d_state,
            context_window=m.context_window,
            kind=m.decoder_kind,
            scan_mode=m.scan_mode,
        )

    # context

    def context_images(self, ids: List[str], rng: Optional[np.random.Generator] = None) -> Optional[ContextImages]:
        """Stack the retrieved context images for a batch; features are recomputed by the caller's forward."""
        ctx = self.config.context
        if not ctx.enabled or self.index is None:
            return None
        train = self._dataset("train")
        positives, negatives = [], []
        for sample_id in ids:
            sample_set = retrieve(self.index, sample_id, ctx.n_pairs, ctx.fixed_pair, ctx.seed, rng)
            positives.append(torch.stack([train.image(r) for r in sample_set.positives]))
            negatives.append(torch.stack([train.image(r) for r in sample_set.negatives]))
        return ContextImages(positives=torch.stack(positives), negatives=torch.stack(negatives))

    # training

    def train(self) -> TrainResult:
        if self.model is None:
            self.prepare()
        cfg = self.config
        out_dir = Path(cfg.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.write_echo(out_dir)

        loader = DataLoader(
            self._dataset("train"),
            batch_size=cfg.train.batch_size,
            shuffle=True,
            collate_fn=collate_reports,
            num_workers=cfg.train.num_workers,
            generator=torch.Generator().manual_seed(cfg.train.seed),
        )
        params = [p for p in self.model.parameters() if p.requires_grad]
        optimizer = torch.optim.Adam(params, lr=cfg.train.learning_rate)
        writer = self._summary_writer(out_dir)

        self.step_log = []
        epoch_losses: List[float] = []
        global_step = 0
        start = time.time()
        self.model.train()
        for epoch in range(cfg.train.epochs):
            rng = epoch_stream(cfg.context.seed, epoch)
            total_nll, total_tokens = 0.0, 0
            for step, batch in enumerate(loader):
                context = self.context_images(batch["ids"], rng)
                logits, tb = self.model(batch["images"], batch["report_ids"], context)
                value = loss(logits, tb.targets, tb.mask, cfg.train.loss_reduction)
                if not torch.isfinite(value):
                    raise TrainingDivergedError(f"loss became {value.item()}", epoch, step)
                optimizer.zero_grad()
                value.backward()
                if cfg.train.max_grad_norm:
                    torch.nn.utils.clip_grad_norm_(params, cfg.train.max_grad_norm)
                optimizer.step()

                tokens = int(tb.mask.sum())
                batch_nll = value.item() * (tokens if cfg.train.loss_reduction == "mean" else 1)
                total_nll += batch_nll
                total_tokens += tokens
                self.step_log.append(
                    {"epoch": epoch, "step": global_step, "loss": batch_nll / tokens, "tokens": tokens}
                )
                if writer:
                    writer.add_scalar("loss/step", batch_nll / tokens, global_step)
                if cfg.train.log_every and global_step % cfg.train.log_every == 0:
                    logger.debug(f"epoch {epoch} step {global_step}: loss {batch_nll / tokens:.4f}")
                global_step += 1

            epoch_loss = total_nll / max(total_tokens, 1)
            epoch_losses.append(epoch_loss)
            if writer:
                writer.add_scalar("loss/epoch", epoch_loss, epoch)
                writer.add_scalar("lr", cfg.train.learning_rate, epoch)
            logger.info(f"Epoch {epoch + 1}/{cfg.train.epochs}: per-token loss {epoch_loss:.4f}")

        if writer:
            writer.close()
        checkpoint = self.save(out_dir / CHECKPOINT_NAME)
        self.save_run_log(out_dir / RUN_LOG_NAME, epoch_losses, start)
        return TrainResult(
            epoch_losses=epoch_losses,
            checkpoint=checkpoint,
            steps=global_step,
            final_loss=epoch_losses[-1] if epoch_losses else math.nan,
        )

    def _summary_writer(self, out_dir: Path):
        if not self.config.train.tensorboard:
            return None
        from torch.utils.tensorboard import SummaryWriter

        return SummaryWriter(log_dir=str(out_dir / "tensorboard"))

    @torch.no_grad()
    def evaluate_loss(self, split: str = "train") -> float:
        """Per-token NLL over a whole split with the current weights."""
        self.model.eval()
        loader = DataLoader(self._dataset(split), batch_size=self.config.train.batch_size, collate_fn=collate_reports)
        rng = epoch_stream(self.config.context.seed, 0)
        total, tokens = 0.0, 0
        for batch in loader:
            logits, tb = self.model(batch["images"], batch["report_ids"], self.context_images(batch["ids"], rng))
            total += loss(logits, tb.targets, tb.mask, "sum").item()
            tokens += int(tb.mask.sum())
        return total / max(tokens, 1)

    def save_run_log(self, path: Path, epoch_losses: List[float], start: float) -> None:
        payload = {
            "metadata": {
                "total_steps": len(self.step_log),
                "epochs": len(epoch_losses),
                "epoch_losses": epoch_losses,
                "start_time": datetime.fromtimestamp(start).isoformat(),
                "end_time": datetime.now().isoformat(),
                "wall_seconds": time.time() - start,
                "seed": self.config.train.seed,
                "context_pairs": self.config.context.n_pairs,
                "strategy": self.config.context.strategy,
            },
            "data": self.step_log,
        }
        path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        logger.info(f"Saved {len(self.step_log)} training steps to {path}")

    # persistence

    def save(self, path: Union[str, Path]) -> Path:
        metadata = {
            "config": self.config.model_dump(mode="json"),
            "vocab": self.vocab.tokens,
            "prompt_tokens": vars(self.prompt_tokens),
            "created": datetime.now().isoformat(),
        }
        save_checkpoint(path, self.model.state_dict(), metadata)
        return Path(path)

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path], config: Optional[RunConfig] = None) -> "ReportEngine":
        """Rebuild an engine around saved weights; data paths and generation settings come from config if given."""
        state, metadata = load_checkpoint(path)
        saved = RunConfig.model_validate(metadata["config"])
        if config is not None:
            # the backbone's token grid is fixed by the trained resolution
            data = config.data.model_copy(update={"image_size": saved.data.image_size})
            saved = saved.model_copy(update={"data": data, "generate": config.generate, "output_dir": config.output_dir})
        engine = cls(saved)
        engine.vocab = Vocabulary(tokens=metadata["vocab"])
        engine.prompt_tokens = PromptTokens(**metadata["prompt_tokens"])
        engine.model = ReportGenerator(
            engine._backbone_config(),
            engine._decoder_config(len(engine.vocab)),
            engine.prompt_tokens,
            residual_stage=saved.context.residual_stage,
        )
        engine.model.load_state_dict(state)
        engine.model.eval()
        logger.info(f"Loaded checkpoint {path}")
        return engine

    # generation

    def generate_reports(
        self,
        split: Optional[str] = None,
        records: Optional[List[SampleRecord]] = None,
        beam_width: Optional[int] = None,
        max_len: Optional[int] = None,
    ) -> List[GeneratedReport]:
        """Decode one report per record; beam_width and max_len override the configured values for this call."""
        cfg = self.config
        beam_width = beam_width or cfg.generate.beam_width
        max_len = max_len or cfg.generate.max_len
        if self.manifest is None:
            self.load_data()
        if self.index is None:
            self._build_index()
        if records is not None:
            dataset = ReportDataset(records, self.root, self.vocab, cfg.data.image_size)
        else:
            dataset = self._dataset(split or cfg.generate.split)
        self.model.eval()
        rng = epoch_stream(cfg.context.seed, 0)
        rows = []
        for i in range(len(dataset)):
            record = dataset.records[i]
            context = self.context_images([record.id], rng)
            ids = self.model.generate(
                dataset.image(record).unsqueeze(0),
                context,
                beam_width=beam_width,
                max_len=max_len,
                length_penalty=cfg.generate.length_penalty,
            )[0]
            rows.append(GeneratedReport(record.id, self.vocab.decode(ids), record.report))
        logger.info(f"Generated {len(rows)} reports")
        return rows


def write_results(rows: List[GeneratedReport], out_dir: Union[str, Path], metadata: Dict = None) -> Path:
    """reports.txt (id<TAB>report per line) and results.json with hypothesis/reference pairs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "reports.txt").write_text("".join(f"{r.id}\t{r.hypothesis}\n" for r in rows), encoding="utf-8")
    path = out_dir / "results.json"
    payload = {"metadata": {"samples": len(rows), **(metadata or {})}, "data": [vars(r) for r in rows]}
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return path


# commands


def cmd_synth_data(config: RunConfig) -> Manifest:
    d = config.data
    synth = SyntheticConfig(
        num_samples=d.num_samples,
        image_size=d.image_size,
        prevalence=d.prevalence,
        ratios=d.split_ratios,
        seed=d.seed,
    )
    manifest = generate_synthetic_dataset(synth, d.data_dir)
    config.write_echo(d.data_dir)
    return manifest


def cmd_train(config: RunConfig) -> TrainResult:
    return ReportEngine(config).train()


def cmd_generate(config: RunConfig, checkpoint: Union[str, Path], split: Optional[str] = None) -> Path:
    if not Path(checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    engine = ReportEngine.from_checkpoint(checkpoint, config)
    split = split or config.generate.split
    rows = engine.generate_reports(split)
    config.write_echo(config.output_dir)
    return write_results(
        rows,
        config.output_dir,
        {"split": split, "checkpoint": str(checkpoint), "context_pairs": engine.config.context.n_pairs},
    )


def cmd_evaluate(config: RunConfig, results: Union[str, Path]) -> MetricReport:
    if not Path(results).exists():
        raise FileNotFoundError(f"results file not found: {results}")
    corpus = load_results(results)
    report = evaluate_corpus(corpus)
    out_dir = Path(config.output_dir)
    config.write_echo(out_dir)
    save_report(report, out_dir / "metrics.json")
    return report


def cmd_bench(config: RunConfig) -> Tuple[list, str]:
    b = config.bench
    records = bench_scan_vs_attention(b.lengths, b.repeats, b.width, b.d_state, b.warmup, seed=config.train.seed)
    config.write_echo(config.output_dir)
    save_bench(records, config.output_dir, settings=b.model_dump(), plot=b.plot)
    return records, summary_table(records)
