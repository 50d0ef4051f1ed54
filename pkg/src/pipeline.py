"""
End-to-end commands: corpus generation, EVC-CLAP and AdaFM-VC training,
reference store construction, conversion in the three embedding modes and
evaluation tables.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from cfm import SamplerConfig
from checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from clap import ClapModel, EmoBatch, clap_train_step, embed, embed_many
from corpus import (
    EMOTION_WORDS,
    PROMPT_VOCABULARY,
    CorpusSplit,
    Utterance,
    generate_corpus,
    load_corpus,
    render_prompt,
    save_corpus,
    split,
    synth_target,
    tokenize_prompt,
)
from errors import CheckpointError, DataError, InputError
from metrics import (
    EmotionProbe,
    cond_mean_error,
    eecs_surrogate,
    emotion_projection,
    mel_rmse,
    retrieval_accuracy,
    spearman,
)
from optim import Optimizer
from rng import derive_seed, make_rng
from store import ReferenceStore, build_reference_store, retrieve
from util import RunConfig, moving_average, pad_sequences
from vc import AdaFmVc, VcBatch, vc_train_step

MODES = ("reference", "prompt", "retrieval")
ABLATION_MODES = ("reference", "prompt")
PROMPT_INTENSITY = 0.75

METRICS_COLUMNS = [
    "mode",
    "intensity",
    "conversions",
    "eecs_surrogate",
    "emotion_projection",
    "cond_mean_error",
    "mel_rmse",
    "retrieval_accuracy",
]
ABLATION_COLUMNS = [
    "label",
    "mode",
    "use_emo_label",
    "loss_variant",
    "use_aig",
    "eecs_surrogate",
    "cond_mean_error",
    "retrieval_accuracy",
]


def prompt_emotion(text: str) -> int:
    """Emotion class named by a prompt's emotion word."""
    words = set(text.lower().split())
    for emotion_id, name in enumerate(EMOTION_WORDS):
        if words & set(EMOTION_WORDS[name]):
            return emotion_id
    raise InputError(f"prompt {text!r} names no known emotion; pass the target emotion explicitly")


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


def read_csv(path: Path) -> List[dict]:
    with open(path, "r", newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


class ConversionReport:
    def __init__(
        self,
        mode: str,
        intensity: float,
        source_id: int,
        target_emotion: int,
        mel: np.ndarray,
        emotion_vector: np.ndarray,
        metrics: Dict[str, float],
        retrieval_hit: Optional[int] = None,
    ):
        self.mode = mode
        self.intensity = intensity
        self.source_id = source_id
        self.target_emotion = target_emotion
        self.mel = mel
        self.emotion_vector = emotion_vector
        self.metrics = metrics
        self.retrieval_hit = retrieval_hit

    def to_dict(self):
        return {
            "mode": self.mode,
            "intensity": self.intensity,
            "source_id": self.source_id,
            "target_emotion": self.target_emotion,
            "metrics": self.metrics,
            "retrieval_hit": self.retrieval_hit,
            "mel": self.mel.tolist(),
        }


class EmotionTarget:
    """Resolved conditioning for one conversion: embedding plus the oracle's class and intensity."""

    def __init__(self, embedding: np.ndarray, emotion_id: int, intensity: float, retrieval_hit: Optional[int] = None):
        self.embedding = embedding
        self.emotion_id = emotion_id
        self.intensity = intensity
        self.retrieval_hit = retrieval_hit


class Pipeline:
    def __init__(self, config: RunConfig):
        self.config = config
        self.out_dir = Path(config.out_dir)
        self.logger = logging.getLogger(__name__)
        self.spec = config.corpus.emotion_spec(config.seed)
        self._corpus: Optional[List[Utterance]] = None
        self._split: Optional[CorpusSplit] = None
        self._clap: Optional[ClapModel] = None
        self._vc: Optional[AdaFmVc] = None
        self._store: Optional[ReferenceStore] = None
        self._probe: Optional[EmotionProbe] = None

    def path(self, name: str) -> Path:
        return self.out_dir / name

    # Corpus

    def gen_corpus(self) -> Tuple[List[Utterance], CorpusSplit]:
        corpus = generate_corpus(self.spec, self.config.corpus.n, self.config.seed)
        corpus_split = split(corpus, self.config.corpus.split_ratios, self.config.seed)
        save_corpus(self.path("corpus.jsonl"), corpus)
        with open(self.path("split.json"), "w", encoding="utf-8") as handle:
            json.dump(corpus_split.to_dict(), handle, sort_keys=True)
        self.config.save(self.path("config.json"))
        self.logger.info(
            f"Corpus split: {len(corpus_split.train)} train, {len(corpus_split.val)} val, "
            f"{len(corpus_split.test)} test"
        )
        self._corpus, self._split = corpus, corpus_split
        return corpus, corpus_split

    def corpus(self) -> Tuple[List[Utterance], CorpusSplit]:
        if self._corpus is None:
            if self.path("corpus.jsonl").exists() and self.path("split.json").exists():
                self._corpus = load_corpus(self.path("corpus.jsonl"))
                with open(self.path("split.json"), "r", encoding="utf-8") as handle:
                    self._split = CorpusSplit.from_dict(json.load(handle))
            else:
                self.gen_corpus()
        return self._corpus, self._split

    def utterances(self, ids: Sequence[int]) -> List[Utterance]:
        corpus, _ = self.corpus()
        try:
            return [corpus[int(i)] for i in ids]
        except IndexError as e:
            raise InputError(f"utterance id out of range (corpus has {len(corpus)} items)") from e

    # Models

    def build_clap_model(self) -> ClapModel:
        params = self.config.clap
        return ClapModel(
            audio_dim=self.spec.audio_dim,
            vocab_size=len(PROMPT_VOCABULARY),
            dim=params.dim,
            hidden=params.hidden,
            temperature_init=params.temperature_init,
            seed=derive_seed(self.config.seed, "clap"),
        )

    def build_vc_model(self) -> AdaFmVc:
        params = self.config.vc
        return AdaFmVc(
            content_dim=self.spec.content_dim,
            emotion_dim=self.config.clap.dim,
            mel_dim=self.spec.mel_dim,
            dim=params.dim,
            fusion_blocks=params.fusion_blocks,
            cfm_blocks=params.cfm_blocks,
            heads=params.heads,
            sigma_min=params.sigma_min,
            p_uncond=params.p_uncond,
            use_aig=self.config.ablation.use_aig,
            seed=derive_seed(self.config.seed, "vc"),
        )

    def _metadata(self, step: int, **extra) -> dict:
        metadata = {
            "step": step,
            "config_hash": self.config.config_hash(),
            "config": self.config.to_dict(),
            "ablation": self.config.ablation.to_dict(),
        }
        metadata.update(extra)
        return metadata

    def _read_checkpoint(self, name: str) -> Checkpoint:
        path = self.path(name)
        if not path.exists():
            raise CheckpointError(f"checkpoint {path} does not exist; run the matching train command first")
        return load_checkpoint(path)

    def load_clap(self) -> ClapModel:
        if self._clap is None:
            model = self.build_clap_model()
            self._read_checkpoint("clap.ckpt").restore(model, kind="clap")
            self._clap = model.eval()
        return self._clap

    def load_vc(self) -> AdaFmVc:
        if self._vc is None:
            model = self.build_vc_model()
            self._read_checkpoint("vc.ckpt").restore(model, kind="vc")
            self._vc = model.eval()
        return self._vc

    # Training

    def clap_retrieval_accuracy(self, model: ClapModel, references: Sequence[Utterance], queries: Sequence[Utterance]) -> float:
        store = build_reference_store(references, model)
        prompts = embed_many("prompt", [u.prompt_tokens for u in queries], model)
        return retrieval_accuracy(prompts, [u.emotion_id for u in queries], store)

    def train_clap(self) -> Tuple[ClapModel, List[dict]]:
        """
        Train EVC-CLAP on the train split with Adam.

        Writes clap.ckpt, clap_history.csv (epoch, loss, val_retrieval_accuracy)
        and clap_loss_plot.csv.
        """
        corpus, corpus_split = self.corpus()
        train, val = self.utterances(corpus_split.train), self.utterances(corpus_split.val)
        params, ablation = self.config.clap, self.config.ablation
        model = self.build_clap_model()
        optimizer = Optimizer(
            model.named_parameters(), "adam", lr=params.lr, weight_decay=params.weight_decay
        )
        self.logger.info(
            f"Training EVC-CLAP on {len(train)} utterances for {params.epochs} epochs "
            f"(lr={params.lr}, batch={params.batch_size}, ablation={ablation.label})"
        )

        history = []
        for epoch in range(1, params.epochs + 1):
            order = make_rng(self.config.seed, "clap-epoch", epoch).permutation(len(train))
            losses = []
            for start in range(0, len(order), params.batch_size):
                chunk = order[start : start + params.batch_size]
                if len(chunk) < 2:
                    continue
                batch = EmoBatch.from_utterances([train[i] for i in chunk])
                losses.append(
                    clap_train_step(
                        batch,
                        model,
                        optimizer,
                        params.alpha_e,
                        params.alpha,
                        ablation.use_emo_label,
                        ablation.loss_variant,
                    )
                )
            accuracy = self.clap_retrieval_accuracy(model, train, val)
            history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_retrieval_accuracy": accuracy})
            self.logger.info(f"CLAP epoch {epoch}: loss {history[-1]['loss']:.6f}, val retrieval {accuracy:.3f}")

        checkpoint = Checkpoint.from_module(
            "clap", model, self._metadata(optimizer.state.step, epochs=params.epochs), optimizer
        )
        save_checkpoint(checkpoint, self.path("clap.ckpt"))
        self.config.save(self.path("config.json"))
        write_csv(self.path("clap_history.csv"), ["epoch", "loss", "val_retrieval_accuracy"], history)
        self._write_loss_plot("clap_loss_plot.csv", [row["loss"] for row in history])
        self._clap = model.eval()
        return model, history

    def train_vc(self, iterations: Optional[int] = None, resume: bool = False) -> Tuple[AdaFmVc, List[dict]]:
        """
        Train FuEncoder + CFM decoder against the frozen CLAP audio embeddings.

        Args:
            iterations: Total step count to reach (defaults to the config value).
            resume: Continue from vc.ckpt, restoring parameters and optimizer moments.
        """
        clap = self.load_clap()
        corpus, corpus_split = self.corpus()
        train = self.utterances(corpus_split.train)
        emotions = embed_many("reference", [u.audio_features for u in train], clap)
        params = self.config.vc
        total = params.iterations if iterations is None else iterations

        model = self.build_vc_model()
        optimizer = Optimizer(
            model.named_parameters(), "adamw", lr=params.lr, weight_decay=params.weight_decay
        )
        history: List[dict] = []
        if resume:
            checkpoint = self._read_checkpoint("vc.ckpt")
            checkpoint.restore(model, kind="vc", optimizer=optimizer)
            if self.path("vc_history.csv").exists():
                history = [
                    {"step": int(row["step"]), "loss": float(row["loss"])}
                    for row in read_csv(self.path("vc_history.csv"))
                    if int(row["step"]) <= checkpoint.step
                ]
            self.logger.info(f"Resuming AdaFM-VC training from step {checkpoint.step}")

        self.logger.info(
            f"Training AdaFM-VC to step {total} (lr={params.lr}, batch={params.batch_size}, "
            f"use_aig={self.config.ablation.use_aig})"
        )
        batch_size = min(params.batch_size, len(train))
        for step in range(optimizer.state.step + 1, total + 1):
            chosen = make_rng(self.config.seed, "vc-batch", step).choice(len(train), size=batch_size, replace=False)
            batch = VcBatch.from_utterances([train[i] for i in chosen], emotions[chosen])
            loss = vc_train_step(batch, model, optimizer, derive_seed(self.config.seed, "vc-step", step))
            history.append({"step": step, "loss": loss})
            if step % params.log_every == 0 or step == total:
                self.logger.info(f"VC step {step}: loss {loss:.6f}, gate {model.fuencoder.gate.item():.4f}")

        checkpoint = Checkpoint.from_module(
            "vc", model, self._metadata(optimizer.state.step, use_aig=self.config.ablation.use_aig), optimizer
        )
        save_checkpoint(checkpoint, self.path("vc.ckpt"))
        self.config.save(self.path("config.json"))
        write_csv(self.path("vc_history.csv"), ["step", "loss"], history)
        self._write_loss_plot("vc_loss_plot.csv", [row["loss"] for row in history])
        self._vc = model.eval()
        return model, history

    def _write_loss_plot(self, name: str, losses: Sequence[float]):
        smoothed = moving_average(losses, 5)
        write_csv(self.path(name), ["x", "y"], [{"x": i + 1, "y": float(y)} for i, y in enumerate(smoothed)])

    # Store and conversion

    def build_store(self) -> ReferenceStore:
        """Reference store over the training split (every training utterance counts as a reference)."""
        _, corpus_split = self.corpus()
        store = build_reference_store(self.utterances(corpus_split.train), self.load_clap())
        store.save(self.path("store.json"))
        self._store = store
        return store

    def load_store(self) -> ReferenceStore:
        if self._store is None:
            if self.path("store.json").exists():
                self._store = ReferenceStore.load(self.path("store.json"))
            else:
                self.build_store()
        return self._store

    @property
    def probe(self) -> EmotionProbe:
        if self._probe is None:
            self._probe = EmotionProbe(self.spec, seed=derive_seed(self.config.seed, "probe"))
        return self._probe

    def sample_seed(self, source_id: int, lam: float) -> int:
        return derive_seed(self.config.sampler.seed, "convert", int(source_id), int(round(lam * 1000)))

    def resolve_target(
        self,
        mode: str,
        reference_id: Optional[int] = None,
        prompt: Optional[str] = None,
        target_emotion: Optional[int] = None,
    ) -> EmotionTarget:
        clap = self.load_clap()
        if mode == "reference":
            if reference_id is None:
                raise InputError("reference mode needs a reference utterance id")
            (reference,) = self.utterances([reference_id])
            vector = embed("reference", reference.audio_features, clap).vector
            return EmotionTarget(vector, reference.emotion_id, reference.intensity_gt)
        if mode not in MODES:
            raise InputError(f"unknown mode {mode!r}; expected one of {MODES}")
        if not prompt:
            raise InputError(f"{mode} mode needs a prompt")
        query = embed("prompt", prompt, clap).vector
        if mode == "prompt":
            emotion_id = prompt_emotion(prompt) if target_emotion is None else target_emotion
            self.spec.check_emotion(emotion_id)
            return EmotionTarget(query, emotion_id, PROMPT_INTENSITY)
        hit = retrieve(query, self.load_store(), k=1)[0][0]
        target = self.resolve_target("reference", reference_id=hit)
        target.retrieval_hit = hit
        return target

    def generate(self, sources: Sequence[Utterance], targets: Sequence[EmotionTarget], lam: float) -> List[np.ndarray]:
        """Convert a batch of sources; each item keeps its own noise seed."""
        if not 0.0 <= lam <= 2.0:
            raise InputError(f"intensity must be in [0, 2], got {lam}")
        content, mask = pad_sequences([s.content_features for s in sources])
        sampler = SamplerConfig(self.config.sampler.steps, self.config.sampler.guidance_scale, self.config.sampler.seed)
        mels = self.load_vc().convert(
            content,
            np.stack([t.embedding for t in targets]),
            lam,
            sampler,
            mask,
            item_seeds=[self.sample_seed(s.id, lam) for s in sources],
        )
        return [mels[i, : s.num_frames] for i, s in enumerate(sources)]

    def report(self, mode: str, source: Utterance, target: EmotionTarget, lam: float, mel: np.ndarray) -> ConversionReport:
        oracle = synth_target(self.spec, source.content_features, target.emotion_id, lam * target.intensity)
        vector = self.probe.recover(mel, source.content_features)
        metrics = {
            "eecs_surrogate": eecs_surrogate(vector, self.spec, target.emotion_id),
            "emotion_projection": emotion_projection(vector, self.spec, target.emotion_id),
            "cond_mean_error": cond_mean_error(mel, oracle),
            "mel_rmse": mel_rmse(mel, oracle),
        }
        return ConversionReport(mode, lam, source.id, target.emotion_id, mel, vector, metrics, target.retrieval_hit)

    def convert(
        self,
        mode: str,
        source_id: int,
        lam: float = 1.0,
        reference_id: Optional[int] = None,
        prompt: Optional[str] = None,
        target_emotion: Optional[int] = None,
    ) -> ConversionReport:
        """
        Convert one source utterance.

        Args:
            mode: "reference", "prompt" or "retrieval".
            source_id: Utterance whose content is kept.
            lam: Emotion intensity in [0, 2].
            reference_id: Reference utterance (reference mode).
            prompt: Emotion prompt (prompt and retrieval modes).
            target_emotion: Class used for the oracle in prompt mode; inferred from the prompt when omitted.
        """
        if mode not in MODES:
            raise InputError(f"unknown mode {mode!r}; expected one of {MODES}")
        if not 0.0 <= lam <= 2.0:
            raise InputError(f"intensity must be in [0, 2], got {lam}")
        (source,) = self.utterances([source_id])
        target = self.resolve_target(mode, reference_id, prompt, target_emotion)
        (mel,) = self.generate([source], [target], lam)
        report = self.report(mode, source, target, lam, mel)
        self.logger.info(
            f"Converted {source_id} ({mode}, lambda={lam}): eecs {report.metrics['eecs_surrogate']:.3f}, "
            f"cond error {report.metrics['cond_mean_error']:.4f}"
        )
        return report

    # Evaluation

    def evaluation_plan(self) -> List[Tuple[Utterance, int, Utterance, str]]:
        """(source, target class, reference of that class, prompt of that class) per test conversion."""
        _, corpus_split = self.corpus()
        sources = self.utterances(corpus_split.test[: self.config.eval_conversions])
        if not sources:
            raise DataError("test split is empty")
        by_class: Dict[int, List[Utterance]] = {}
        for utterance in self.utterances(corpus_split.train):
            by_class.setdefault(utterance.emotion_id, []).append(utterance)

        plan = []
        for index, source in enumerate(sources):
            emotion_id = index % self.spec.num_classes
            rng = make_rng(self.config.seed, "eval-plan", source.id)
            candidates = by_class[emotion_id]
            reference = candidates[int(rng.integers(len(candidates)))]
            templates = self.spec.template_ids(emotion_id)
            prompt, _ = render_prompt(
                self.spec,
                emotion_id,
                templates[int(rng.integers(len(templates)))],
                derive_seed(self.config.seed, "eval-prompt", source.id),
            )
            plan.append((source, emotion_id, reference, prompt))
        return plan

    def _targets(self, mode: str, plan) -> List[EmotionTarget]:
        clap = self.load_clap()
        if mode == "reference":
            references = [reference for _, _, reference, _ in plan]
        else:
            queries = embed_many("prompt", [tokenize_prompt(p) for *_, p in plan], clap)
            if mode == "prompt":
                return [EmotionTarget(q, emotion_id, PROMPT_INTENSITY) for q, (_, emotion_id, _, _) in zip(queries, plan)]
            store = self.load_store()
            hits = [retrieve(q, store, k=1)[0][0] for q in queries]
            references = self.utterances(hits)
        vectors = embed_many("reference", [r.audio_features for r in references], clap)
        hits = [None] * len(references) if mode == "reference" else [r.id for r in references]
        return [EmotionTarget(v, r.emotion_id, r.intensity_gt, hit) for v, r, hit in zip(vectors, references, hits)]

    def sweep(self, modes: Sequence[str] = MODES, grid: Optional[Sequence[float]] = None) -> Dict[Tuple[str, float], List[ConversionReport]]:
        plan = self.evaluation_plan()
        sources = [source for source, *_ in plan]
        grid = self.config.intensity_grid if grid is None else grid
        cells = {}
        for mode in modes:
            targets = self._targets(mode, plan)
            for lam in grid:
                mels = self.generate(sources, targets, lam)
                cells[(mode, lam)] = [
                    self.report(mode, source, target, lam, mel) for source, target, mel in zip(sources, targets, mels)
                ]
            self.logger.info(f"Evaluated {mode} mode over {len(grid)} intensities x {len(sources)} sources")
        return cells

    def _retrieval_label_accuracy(self, plan, reports: Sequence[ConversionReport]) -> float:
        store = self.load_store()
        hits = [store.label_of(r.retrieval_hit) == emotion_id for r, (_, emotion_id, _, _) in zip(reports, plan)]
        return float(np.mean(hits))

    def ablation_summary(self) -> List[dict]:
        """One row per ablation mode: scores at lambda = 1 plus prompt retrieval accuracy on the val split."""
        cells = self.sweep(modes=ABLATION_MODES, grid=(1.0,))
        _, corpus_split = self.corpus()
        accuracy = self.clap_retrieval_accuracy(
            self.load_clap(), self.utterances(corpus_split.train), self.utterances(corpus_split.val)
        )
        rows = []
        for mode in ABLATION_MODES:
            reports = cells[(mode, 1.0)]
            row = {"label": self.config.ablation.label, "mode": mode}
            row.update(self.config.ablation.to_dict())
            row["eecs_surrogate"] = float(np.mean([r.metrics["eecs_surrogate"] for r in reports]))
            row["cond_mean_error"] = float(np.mean([r.metrics["cond_mean_error"] for r in reports]))
            row["retrieval_accuracy"] = accuracy
            rows.append(row)
        return rows

    def evaluate(self, compare: Sequence[Path] = ()) -> dict:
        """
        Sweep every mode over the intensity grid and write the result tables.

        Writes metrics.csv (one row per mode and intensity), intensity_plot.csv,
        mode_agreement.csv and, when ``compare`` names other run directories,
        ablation.csv with one row per run and ablation mode.
        """
        plan = self.evaluation_plan()
        cells = self.sweep()
        rows, plot_rows, rho = [], [], {}
        for mode in MODES:
            means = []
            for lam in self.config.intensity_grid:
                reports = cells[(mode, lam)]
                row = {"mode": mode, "intensity": lam, "conversions": len(reports)}
                for key in ("eecs_surrogate", "emotion_projection", "cond_mean_error", "mel_rmse"):
                    row[key] = float(np.mean([r.metrics[key] for r in reports]))
                row["retrieval_accuracy"] = (
                    self._retrieval_label_accuracy(plan, reports) if mode == "retrieval" else ""
                )
                rows.append(row)
                plot_rows.append({"mode": mode, "intensity": lam, "emotion_projection": row["emotion_projection"]})
                means.append(row["emotion_projection"])
            rho[mode] = spearman(self.config.intensity_grid, means)
            self.logger.info(f"{mode}: Spearman rho of emotion projection against intensity {rho[mode]:.3f}")

        write_csv(self.path("metrics.csv"), METRICS_COLUMNS, rows)
        write_csv(self.path("intensity_plot.csv"), ["mode", "intensity", "emotion_projection"], plot_rows)

        anchor = 1.0 if 1.0 in self.config.intensity_grid else self.config.intensity_grid[len(self.config.intensity_grid) // 2]
        agreement = []
        for by_reference, by_prompt in zip(cells[("reference", anchor)], cells[("prompt", anchor)]):
            a, b = by_reference.emotion_vector, by_prompt.emotion_vector
            denominator = np.linalg.norm(a) * np.linalg.norm(b)
            agreement.append(
                {
                    "source_id": by_reference.source_id,
                    "target_emotion": by_reference.target_emotion,
                    "cosine": float(np.dot(a, b) / denominator) if denominator > 0 else 0.0,
                }
            )
        write_csv(self.path("mode_agreement.csv"), ["source_id", "target_emotion", "cosine"], agreement)

        ablation = []
        if compare:
            ablation.extend(self.ablation_summary())
            for run_dir in compare:
                config = RunConfig.load(Path(run_dir) / "config.json")
                config.out_dir = str(run_dir)
                ablation.extend(Pipeline(config).ablation_summary())
            write_csv(self.path("ablation.csv"), ABLATION_COLUMNS, ablation)
        return {"metrics": rows, "spearman": rho, "mode_agreement": agreement, "ablation": ablation}
