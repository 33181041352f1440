"""
Teacher/student training workflow and Single/Fusion inference.

Steps:
    1. train_teacher     annotated data, gold evidence (document-level KL)
    2. infer_silver      teacher token weights and evidence on distant data
    3. train_student     fresh model on distant data, token-level KL to the teacher
    4. finetune_student  student continues on annotated data

Usage:
    teacher = train_teacher(train, TrainConfig.for_phase("teacher", epochs=60, lr=1e-3))
    silver = infer_silver(teacher, distant)
    student = train_student(distant, silver, TrainConfig.for_phase("student-distill"), vocabulary=teacher.vocabulary)
    final = finetune_student(student, train, TrainConfig.for_phase("student-finetune"))
    predictions = infer_fusion(final, dev)
"""
import json
import math
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, asdict, field, fields, replace
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from checkpoint import Checkpoint, CheckpointError
from corpus import Dataset, Document, Entity, Mention, Vocabulary, build_vocabulary
from encoder import EncoderConfig
from gega import DocumentFeatures, GegaConfig, GegaModel, decide_relations, prepare_document, select_evidence
from losses import LossBundle, atl_loss_batch, er_doc_loss, er_sent_loss, total_loss
from metrics import EvaluationReport, PredictionRecord, evaluate
from numerics import DiffTensor, backward
from optimizer import AdamW, ParamGroup, clip_grad_norm, linear_warmup_decay

PHASE_TEACHER = "teacher"
PHASE_DISTILL = "student-distill"
PHASE_FINETUNE = "student-finetune"
PHASES = (PHASE_TEACHER, PHASE_DISTILL, PHASE_FINETUNE)

EVAL_MODES = ("single", "fusion")

SILVER_FORMAT = "gega-silver"
SILVER_VERSION = 1


class TrainingError(RuntimeError):
    """Training hit a non-finite loss."""

    def __init__(self, step: int, title: str, message: str = "non-finite loss"):
        self.step = step
        self.title = title
        super().__init__(f"{message} at step {step} on document {title!r}")


class SilverCoverageError(KeyError):
    """A supervised pair has no silver annotation."""

    def __init__(self, title: str, head: int, tail: int):
        self.title = title
        self.head = head
        self.tail = tail
        super().__init__(f"No silver annotation for pair ({head}, {tail}) of document {title!r}")

    def __str__(self) -> str:
        return self.args[0]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

PHASE_DEFAULTS: Dict[str, dict] = {
    PHASE_TEACHER: dict(epochs=30, batch_size=4, lr=5e-5, lr_added=None, max_grad_norm=1.0,
                        gradient_accumulation_steps=1, test_batch_size=8),
    PHASE_DISTILL: dict(epochs=2, batch_size=4, lr=3e-5, lr_added=None, max_grad_norm=5.0,
                        gradient_accumulation_steps=2, test_batch_size=4),
    PHASE_FINETUNE: dict(epochs=10, batch_size=4, lr=1e-6, lr_added=3e-6, max_grad_norm=2.0,
                         gradient_accumulation_steps=1, test_batch_size=8),
}


@dataclass
class TrainConfig:
    """Optimization settings for one phase; defaults are the teacher phase's."""
    phase: str = PHASE_TEACHER
    epochs: int = 30
    batch_size: int = 4
    lr: float = 5e-5
    lr_added: Optional[float] = None  # None = same as lr
    warmup_ratio: float = 0.06
    max_grad_norm: float = 1.0
    evi_lambda: float = 0.1
    seed: int = 0
    gradient_accumulation_steps: int = 1
    test_batch_size: int = 8
    workers: int = 1

    @classmethod
    def for_phase(cls, phase: str, **overrides) -> 'TrainConfig':
        if phase not in PHASES:
            raise ValueError(f"Unknown phase {phase!r}; expected one of {PHASES}")
        values = dict(PHASE_DEFAULTS[phase], phase=phase)
        values.update(overrides)
        return cls(**values)

    @property
    def loss_phase(self) -> str:
        return "student" if self.phase == PHASE_DISTILL else "teacher"

    @property
    def added_lr(self) -> float:
        return self.lr if self.lr_added is None else self.lr_added

    def validate(self) -> None:
        if self.phase not in PHASES:
            raise ValueError(f"Unknown phase {self.phase!r}; expected one of {PHASES}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("batch_size", "gradient_accumulation_steps", "test_batch_size", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.lr <= 0 or self.added_lr <= 0:
            raise ValueError("Learning rates must be positive")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError(f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}")
        if not 0.0 <= self.evi_lambda <= 1.0:
            raise ValueError(f"evi_lambda must be in [0, 1], got {self.evi_lambda}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'TrainConfig':
        return cls(**{f.name: data[f.name] for f in fields(cls) if f.name in data})


# ---------------------------------------------------------------------------
# Silver annotations
# ---------------------------------------------------------------------------

@dataclass
class SilverRecord:
    """Teacher token importance q and selected evidence for one entity pair."""
    q: np.ndarray
    evidence: List[int]


@dataclass
class SilverAnnotation:
    documents: Dict[str, Dict[Tuple[int, int], SilverRecord]] = field(default_factory=dict)

    def get(self, title: str, head: int, tail: int) -> SilverRecord:
        try:
            return self.documents[title][(head, tail)]
        except KeyError:
            raise SilverCoverageError(title, head, tail) from None

    def num_pairs(self) -> int:
        return sum(len(pairs) for pairs in self.documents.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, SilverAnnotation):
            return NotImplemented
        return json.dumps(self.to_dict()) == json.dumps(other.to_dict())

    def to_dict(self) -> dict:
        return {
            "format": SILVER_FORMAT,
            "version": SILVER_VERSION,
            "documents": {
                title: [{"h": h, "t": t, "q": record.q.tolist(), "evidence": list(record.evidence)}
                        for (h, t), record in pairs.items()]
                for title, pairs in self.documents.items()
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'SilverAnnotation':
        if data.get("format") != SILVER_FORMAT or data.get("version") != SILVER_VERSION:
            raise ValueError(f"Not a version-{SILVER_VERSION} silver annotation file")
        documents = {}
        for title, records in data["documents"].items():
            documents[title] = {
                (int(r["h"]), int(r["t"])): SilverRecord(q=np.array(r["q"], dtype=np.float64),
                                                         evidence=[int(e) for e in r["evidence"]])
                for r in records
            }
        return cls(documents=documents)

    def save(self, filepath: Union[str, Path]) -> None:
        path = Path(filepath)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f)
            f.write("\n")

    @classmethod
    def load(cls, filepath: Union[str, Path]) -> 'SilverAnnotation':
        path = Path(filepath)
        if not path.exists():
            raise FileNotFoundError(f"Silver annotation file not found: {path}")
        with open(path, 'r') as f:
            return cls.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainingExample:
    features: DocumentFeatures
    teacher_q: Optional[np.ndarray] = None  # (pairs, tokens), student distillation only


@dataclass
class DocumentResult:
    title: str
    losses: Dict[str, float]
    gradients: Optional[Dict[str, np.ndarray]]

    @property
    def finite(self) -> bool:
        return self.gradients is not None


@dataclass
class EpochSummary:
    phase: str
    epoch: int
    steps: int
    l_re: float
    l_er: float
    total: float

    def format_line(self, num_epochs: int) -> str:
        return (f"Epoch {self.epoch:>2}/{num_epochs} | steps {self.steps} | l_re {self.l_re:.4f} | "
                f"l_er {self.l_er:.4f} | total {self.total:.4f}")


class TrainingLog:
    """Line-delimited JSON records, one per optimizer step."""

    FIELDS = ("phase", "epoch", "step", "l_re", "l_er", "total", "grad_norm", "lr")

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        self.records: List[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        record = {key: record[key] for key in self.FIELDS}
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(record) + "\n")


def document_loss(model: GegaModel, example: TrainingExample, cfg: TrainConfig) -> LossBundle:
    """Loss of one document: mean ATL over its pairs plus the phase's evidence term."""
    features = example.features
    out = model.forward(features)
    l_re = atl_loss_batch(out.scores, features.labels)
    if cfg.evi_lambda == 0.0:
        l_er = DiffTensor(0.0)
    elif cfg.loss_phase == "student":
        l_er = er_sent_loss(example.teacher_q, out.signals.q, features.supervised)
    else:
        l_er = er_doc_loss(features.evidence, out.signals.p, features.evidence_mask)
    return total_loss(l_re, l_er, cfg.evi_lambda, cfg.loss_phase)


def document_gradients(model: GegaModel, example: TrainingExample, cfg: TrainConfig,
                       scale: float) -> DocumentResult:
    """Gradients of scale * loss for one document, taken on a fresh tape."""
    model.params.zero_grad()
    bundle = document_loss(model, example, cfg)
    losses = bundle.to_dict()
    if not bundle.is_finite():
        return DocumentResult(example.features.title, losses, None)
    backward(bundle.total * scale)
    return DocumentResult(example.features.title, losses, model.params.gradients())


def _gradient_worker(args) -> DocumentResult:
    model, example, cfg, scale = args
    return document_gradients(model, example, cfg, scale)


def _batch_gradients(model: GegaModel, batch: List[TrainingExample], cfg: TrainConfig, scale: float,
                     executor: Optional[ProcessPoolExecutor]) -> List[DocumentResult]:
    if executor is None:
        return [document_gradients(model, example, cfg, scale) for example in batch]
    futures = {executor.submit(_gradient_worker, (model, example, cfg, scale)): i
               for i, example in enumerate(batch)}
    results = [None] * len(batch)
    for future in as_completed(futures):
        results[futures[future]] = future.result()
    return results


def parameter_groups(model: GegaModel, cfg: TrainConfig) -> List[ParamGroup]:
    """Encoder parameters train at lr, the layers added on top at lr_added."""
    return [ParamGroup(model.encoder_parameter_names(), cfg.lr),
            ParamGroup(model.added_parameter_names(), cfg.added_lr)]


def fit(model: GegaModel, examples: List[TrainingExample], cfg: TrainConfig,
        log: Optional[TrainingLog] = None, verbose: bool = False,
        on_epoch: Optional[Callable[[EpochSummary], None]] = None) -> List[EpochSummary]:
    """
    Optimize the model over the examples for cfg.epochs.

    Documents are shuffled per epoch from cfg.seed. Per-document gradients
    are summed in document order, so results do not depend on cfg.workers.
    Each optimizer step covers gradient_accumulation_steps batches (fewer
    for the last step of an epoch) and averages their gradients; the
    learning rate warms up linearly over warmup_ratio of all steps and then
    decays linearly to 0.
    """
    cfg.validate()
    if not examples or cfg.epochs == 0:
        return []
    log = log or TrainingLog()
    rng = np.random.default_rng(cfg.seed)
    n = len(examples)
    batches_per_epoch = math.ceil(n / cfg.batch_size)
    steps_per_epoch = math.ceil(batches_per_epoch / cfg.gradient_accumulation_steps)
    total_steps = steps_per_epoch * cfg.epochs
    warmup_steps = int(total_steps * cfg.warmup_ratio)
    optimizer = AdamW(model.params, parameter_groups(model, cfg))

    history = []
    step = 0
    executor = ProcessPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(n)
            batches = [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
            accumulated: Optional[Dict[str, np.ndarray]] = None
            pending: List[Dict[str, float]] = []
            epoch_losses: List[Dict[str, float]] = []
            pending_batches = 0
            for b_idx, batch in enumerate(batches):
                # The last group of an epoch may hold fewer batches.
                group_start = b_idx - b_idx % cfg.gradient_accumulation_steps
                group_size = min(cfg.gradient_accumulation_steps, len(batches) - group_start)
                scale = 1.0 / (len(batch) * group_size)
                results = _batch_gradients(model, [examples[i] for i in batch], cfg, scale, executor)
                for result in results:
                    if not result.finite:
                        raise TrainingError(step, result.title)
                    if accumulated is None:
                        accumulated = {name: grad.copy() for name, grad in result.gradients.items()}
                    else:
                        for name, grad in result.gradients.items():
                            accumulated[name] += grad
                    pending.append(result.losses)
                pending_batches += 1
                if pending_batches < cfg.gradient_accumulation_steps and b_idx < len(batches) - 1:
                    continue

                for name, tensor in model.params.items():
                    tensor.grad = accumulated[name]
                grad_norm = clip_grad_norm(model.params, cfg.max_grad_norm)
                lr_scale = linear_warmup_decay(step, warmup_steps, total_steps)
                optimizer.step(lr_scale)
                model.params.zero_grad()
                log.write({
                    "phase": cfg.phase, "epoch": epoch, "step": step,
                    "l_re": float(np.mean([r["l_re"] for r in pending])),
                    "l_er": float(np.mean([r["l_er"] for r in pending])),
                    "total": float(np.mean([r["total"] for r in pending])),
                    "grad_norm": grad_norm, "lr": cfg.lr * lr_scale,
                })
                epoch_losses.extend(pending)
                step += 1
                accumulated = None
                pending = []
                pending_batches = 0

            summary = EpochSummary(
                phase=cfg.phase, epoch=epoch, steps=step,
                l_re=float(np.mean([r["l_re"] for r in epoch_losses])),
                l_er=float(np.mean([r["l_er"] for r in epoch_losses])),
                total=float(np.mean([r["total"] for r in epoch_losses])),
            )
            history.append(summary)
            if verbose:
                print(summary.format_line(cfg.epochs))
            if on_epoch is not None:
                on_epoch(summary)
    finally:
        if executor is not None:
            executor.shutdown()
    return history


def _with_vocab_size(encoder_config: Optional[EncoderConfig], vocabulary: Vocabulary) -> EncoderConfig:
    return replace(encoder_config or EncoderConfig(), vocab_size=len(vocabulary))


def _check_num_class(gega_config: GegaConfig, dataset: Dataset) -> None:
    if gega_config.num_class != dataset.num_class:
        raise ValueError(f"Model num_class {gega_config.num_class} does not match the dataset's "
                         f"{dataset.num_class} relation classes")


def _trainable_documents(dataset: Dataset) -> List[Document]:
    return [doc for doc in dataset if len(doc.entities) >= 2]


def train_teacher(annotated: Dataset, cfg: Optional[TrainConfig] = None,
                  encoder_config: Optional[EncoderConfig] = None, gega_config: Optional[GegaConfig] = None,
                  vocabulary: Optional[Vocabulary] = None, log: Optional[TrainingLog] = None,
                  verbose: bool = False, on_epoch=None) -> Checkpoint:
    """Step 1: train on human-annotated relations and gold evidence."""
    cfg = cfg or TrainConfig.for_phase(PHASE_TEACHER)
    gega_config = gega_config or GegaConfig(num_class=annotated.num_class)
    _check_num_class(gega_config, annotated)
    vocabulary = vocabulary or build_vocabulary([annotated])
    model = GegaModel(_with_vocab_size(encoder_config, vocabulary), gega_config, vocabulary, seed=cfg.seed)
    examples = [TrainingExample(prepare_document(doc, vocabulary, gega_config.num_class))
                for doc in _trainable_documents(annotated)]
    fit(model, examples, cfg, log=log, verbose=verbose, on_epoch=on_epoch)
    return Checkpoint.from_model(model, PHASE_TEACHER, annotated.inventory)


_WORKER_MODEL: Optional[GegaModel] = None


def _init_worker(model: GegaModel) -> None:
    global _WORKER_MODEL
    _WORKER_MODEL = model


def _map_documents(function, model: GegaModel, documents: Sequence[Document], workers: int,
                   chunksize: int = 1) -> list:
    """Apply function(model, doc) to every document, results in document order."""
    if workers <= 1:
        return [function(model, doc) for doc in documents]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(model,)) as executor:
        return list(executor.map(partial(_worker_call, function), documents, chunksize=chunksize))


def _worker_call(function, doc: Document):
    return function(_WORKER_MODEL, doc)


def _silver_for_document(model: GegaModel, doc: Document) -> Dict[Tuple[int, int], SilverRecord]:
    pairs = sorted(doc.facts_by_pair())
    if not pairs:
        return {}
    features = prepare_document(doc, model.vocabulary, model.config.num_class, pairs=pairs)
    out = model.forward(features)
    q = out.signals.q.values
    p = out.signals.p.values
    return {pair: SilverRecord(q=q[row].copy(), evidence=select_evidence(p[row], model.config.evi_thresh))
            for row, pair in enumerate(pairs)}


def infer_silver(teacher: Checkpoint, distant: Dataset, workers: int = 1, batch_size: int = 4) -> SilverAnnotation:
    """Step 2: teacher token importance and evidence for every labeled pair of the distant data."""
    if teacher.inventory != distant.inventory:
        raise CheckpointError("Teacher relation inventory does not match the distant dataset")
    model = teacher.build_model()
    documents = list(distant)
    per_document = _map_documents(_silver_for_document, model, documents, workers, batch_size)
    silver = SilverAnnotation()
    for doc, records in zip(documents, per_document):
        if records:
            silver.documents[doc.title] = records
    return silver


def _student_example(doc: Document, vocabulary: Vocabulary, num_class: int,
                     silver: Optional[SilverAnnotation]) -> TrainingExample:
    features = prepare_document(doc, vocabulary, num_class)
    if silver is None:
        return TrainingExample(features)
    teacher_q = np.zeros((features.num_pairs, features.flat.num_tokens))
    for row in np.flatnonzero(features.supervised):
        head, tail = features.pairs[row]
        record = silver.get(doc.title, head, tail)
        if record.q.shape != (features.flat.num_tokens,):
            raise ValueError(f"Silver q for ({head}, {tail}) of {doc.title!r} covers {record.q.shape[0]} "
                             f"tokens; the document has {features.flat.num_tokens}")
        teacher_q[row] = record.q
    return TrainingExample(features, teacher_q)


def train_student(distant: Dataset, silver: Optional[SilverAnnotation], cfg: Optional[TrainConfig] = None,
                  encoder_config: Optional[EncoderConfig] = None, gega_config: Optional[GegaConfig] = None,
                  vocabulary: Optional[Vocabulary] = None, log: Optional[TrainingLog] = None,
                  verbose: bool = False, on_epoch=None) -> Checkpoint:
    """
    Step 3: train a freshly initialized student on distant labels, pulling its
    token importance toward the teacher's. Without silver the evidence weight
    must be 0.
    """
    cfg = cfg or TrainConfig.for_phase(PHASE_DISTILL)
    if silver is None and cfg.evi_lambda > 0:
        raise ValueError("train_student without silver annotations needs evi_lambda = 0")
    gega_config = gega_config or GegaConfig(num_class=distant.num_class)
    _check_num_class(gega_config, distant)
    vocabulary = vocabulary or build_vocabulary([distant])
    model = GegaModel(_with_vocab_size(encoder_config, vocabulary), gega_config, vocabulary, seed=cfg.seed)
    examples = [_student_example(doc, vocabulary, gega_config.num_class, silver)
                for doc in _trainable_documents(distant)]
    fit(model, examples, cfg, log=log, verbose=verbose, on_epoch=on_epoch)
    return Checkpoint.from_model(model, PHASE_DISTILL, distant.inventory)


def finetune_student(student: Checkpoint, annotated: Dataset, cfg: Optional[TrainConfig] = None,
                     log: Optional[TrainingLog] = None, verbose: bool = False, on_epoch=None) -> Checkpoint:
    """Step 4: continue training the student on annotated data with gold evidence."""
    cfg = cfg or TrainConfig.for_phase(PHASE_FINETUNE)
    cfg.validate()
    if cfg.epochs == 0:
        return student
    if student.inventory != annotated.inventory:
        raise CheckpointError("Student relation inventory does not match the annotated dataset")
    model = student.build_model()
    examples = [TrainingExample(prepare_document(doc, model.vocabulary, model.config.num_class))
                for doc in _trainable_documents(annotated)]
    fit(model, examples, cfg, log=log, verbose=verbose, on_epoch=on_epoch)
    return Checkpoint.from_model(model, PHASE_FINETUNE, student.inventory)


@dataclass
class DistillationResult:
    teacher: Checkpoint
    silver: Optional[SilverAnnotation]
    student: Checkpoint
    final: Checkpoint


def run_distillation(annotated: Dataset, distant: Dataset,
                     teacher_cfg: Optional[TrainConfig] = None, distill_cfg: Optional[TrainConfig] = None,
                     finetune_cfg: Optional[TrainConfig] = None,
                     encoder_config: Optional[EncoderConfig] = None, gega_config: Optional[GegaConfig] = None,
                     skip_self_train: bool = False, skip_finetune: bool = False,
                     log: Optional[TrainingLog] = None, verbose: bool = False) -> DistillationResult:
    """
    All four steps with one vocabulary shared by teacher and student.

    skip_self_train trains the student on distant labels alone (evi_lambda 0,
    no silver); skip_finetune returns the student as the final model.
    """
    vocabulary = build_vocabulary([annotated, distant])
    teacher_cfg = teacher_cfg or TrainConfig.for_phase(PHASE_TEACHER)
    distill_cfg = distill_cfg or TrainConfig.for_phase(PHASE_DISTILL)
    finetune_cfg = finetune_cfg or TrainConfig.for_phase(PHASE_FINETUNE)

    if verbose:
        print("Step 1/4: teacher")
    teacher = train_teacher(annotated, teacher_cfg, encoder_config, gega_config, vocabulary, log, verbose)
    if skip_self_train:
        silver = None
        distill_cfg = replace(distill_cfg, evi_lambda=0.0)
    else:
        if verbose:
            print("Step 2/4: silver annotations")
        silver = infer_silver(teacher, distant, workers=distill_cfg.workers, batch_size=distill_cfg.test_batch_size)
    if verbose:
        print("Step 3/4: student")
    student = train_student(distant, silver, distill_cfg, encoder_config, gega_config, vocabulary, log, verbose)
    if skip_finetune:
        final = student
    else:
        if verbose:
            print("Step 4/4: finetune")
        final = finetune_student(student, annotated, finetune_cfg, log, verbose)
    return DistillationResult(teacher=teacher, silver=silver, student=student, final=final)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _as_model(model: Union[GegaModel, Checkpoint]) -> GegaModel:
    return model.build_model() if isinstance(model, Checkpoint) else model


def _score_document(model: GegaModel, doc: Document,
                    pairs: Optional[Sequence[Tuple[int, int]]] = None) -> Tuple[List[Tuple[int, int]], np.ndarray, np.ndarray]:
    features = prepare_document(doc, model.vocabulary, model.config.num_class, pairs=pairs)
    out = model.forward(features)
    return features.pairs, out.scores.values, out.signals.p.values


def _records_for_pair(title: str, pair: Tuple[int, int], margins: np.ndarray, evidence: List[int],
                      cap: int) -> List[PredictionRecord]:
    return [PredictionRecord(title=title, h_idx=pair[0], t_idx=pair[1], r=r, evidence=evidence,
                             score=float(margins[r]))
            for r in decide_relations(margins, cap)]


def _single_document(model: GegaModel, doc: Document) -> List[PredictionRecord]:
    if len(doc.entities) < 2:
        return []
    pairs, scores, p = _score_document(model, doc)
    records = []
    for row, pair in enumerate(pairs):
        margins = scores[row] - scores[row, 0]
        evidence = select_evidence(p[row], model.config.evi_thresh)
        records.extend(_records_for_pair(doc.title, pair, margins, evidence, model.config.num_labels_cap))
    return records


def infer_single(model: Union[GegaModel, Checkpoint], dataset: Dataset, workers: int = 1,
                 batch_size: int = 8) -> List[PredictionRecord]:
    """Whole-document predictions for every ordered entity pair."""
    model = _as_model(model)
    per_document = _map_documents(_single_document, model, list(dataset), workers, batch_size)
    return [record for records in per_document for record in records]


def evidence_pseudo_document(doc: Document, evidence: Sequence[int]) -> Tuple[Document, Dict[int, int]]:
    """
    Document restricted to the evidence sentences (original order).

    Returns the pseudo-document and a map from original entity index to its
    index in the pseudo-document; entities with no mention in the kept
    sentences are dropped.
    """
    kept = sorted(set(evidence))
    new_sentence = {old: new for new, old in enumerate(kept)}
    entities = []
    mapping = {}
    for e_idx, entity in enumerate(doc.entities):
        mentions = [replace(m, sent_id=new_sentence[m.sent_id])
                    for m in entity.mentions if m.sent_id in new_sentence]
        if mentions:
            mapping[e_idx] = len(entities)
            entities.append(Entity(mentions=mentions, entity_type=entity.entity_type))
    pseudo = Document(title=doc.title, sentences=[list(doc.sentences[s]) for s in kept], entities=entities)
    return pseudo, mapping


def _fusion_document(model: GegaModel, doc: Document) -> List[PredictionRecord]:
    if len(doc.entities) < 2:
        return []
    cap = model.config.num_labels_cap
    pairs, scores, p = _score_document(model, doc)
    single_margins = scores - scores[:, :1]
    evidence = [select_evidence(p[row], model.config.evi_thresh) for row in range(len(pairs))]
    margins = single_margins.copy()

    groups: Dict[Tuple[int, ...], List[int]] = {}
    for row, ev in enumerate(evidence):
        if ev:
            groups.setdefault(tuple(ev), []).append(row)
    for ev, rows in groups.items():
        pseudo, mapping = evidence_pseudo_document(doc, ev)
        rows = [row for row in rows if pairs[row][0] in mapping and pairs[row][1] in mapping]
        if not rows:
            continue
        pseudo_pairs = [(mapping[pairs[row][0]], mapping[pairs[row][1]]) for row in rows]
        _, pseudo_scores, _ = _score_document(model, pseudo, pseudo_pairs)
        for k, row in enumerate(rows):
            margins[row] = single_margins[row] + (pseudo_scores[k] - pseudo_scores[k, 0])

    records = []
    for row, pair in enumerate(pairs):
        records.extend(_records_for_pair(doc.title, pair, margins[row], evidence[row], cap))
    return records


def infer_fusion(model: Union[GegaModel, Checkpoint], dataset: Dataset, workers: int = 1,
                 batch_size: int = 8) -> List[PredictionRecord]:
    """
    Combine whole-document margins with margins on an evidence-only
    pseudo-document per pair. Pairs without evidence, or whose pseudo-document
    loses one of the two entities, keep their single-pass margins.
    """
    model = _as_model(model)
    per_document = _map_documents(_fusion_document, model, list(dataset), workers, batch_size)
    return [record for records in per_document for record in records]


def infer(model: Union[GegaModel, Checkpoint], dataset: Dataset, mode: str = "single",
          workers: int = 1, batch_size: int = 8) -> List[PredictionRecord]:
    if mode not in EVAL_MODES:
        raise ValueError(f"Unknown eval mode {mode!r}; expected one of {EVAL_MODES}")
    if mode == "fusion":
        return infer_fusion(model, dataset, workers, batch_size)
    return infer_single(model, dataset, workers, batch_size)


def evaluate_model(model: Union[GegaModel, Checkpoint], dataset: Dataset, mode: str = "single",
                   train: Optional[Dataset] = None, workers: int = 1, batch_size: int = 8) -> EvaluationReport:
    return evaluate(infer(model, dataset, mode, workers, batch_size), dataset, train)
