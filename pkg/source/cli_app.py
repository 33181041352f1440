"""
GEGA CLI - command-line interface for document-level relation extraction.

Usage (from project root):
    uv run cli.py synth --seed 7 --docs 50 --output-dir runs/synth
    uv run cli.py train-teacher --train-file runs/synth/train.json --output-dir runs/teacher
    uv run cli.py infer-silver --checkpoint runs/teacher/teacher.json --distant-file runs/synth/distant.json
    uv run cli.py train-student --checkpoint runs/teacher/teacher.json --distant-file runs/synth/distant.json \\
        --silver-file runs/silver/silver.json --output-dir runs/student
    uv run cli.py finetune --checkpoint runs/student/student.json --train-file runs/synth/train.json
    uv run cli.py distill --train-file runs/synth/train.json --distant-file runs/synth/distant.json
    uv run cli.py infer --checkpoint runs/final/final.json --test-file runs/synth/dev.json --eval-mode fusion
    uv run cli.py eval --pred runs/infer/result.json --gold runs/synth/dev.json

Every command accepts --config with a JSON config file (or a previous run's
manifest.json). Precedence: defaults < config file < command-line flags.
"""
import json
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional

import typer

from encoder import EncoderConfig
from gega import GegaConfig
from pipeline import (
    EVAL_MODES, PHASE_DISTILL, PHASE_FINETUNE, PHASE_TEACHER, TrainConfig,
)


def get_project_root() -> Path:
    """Get the project root directory (parent of source/)."""
    return Path(__file__).parent.parent


app = typer.Typer(
    name="gega",
    help="GEGA document-level relation extraction - training, distillation, inference and scoring",
    add_completion=False,
)


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

PATH_FIELDS = ("train_file", "dev_file", "test_file", "distant_file", "silver_file",
               "checkpoint", "rel_info", "pred_file", "gold_file", "output_dir")


@dataclass
class RunConfig:
    command: str
    paths: Dict[str, Optional[str]] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    stages: Dict[str, TrainConfig] = field(default_factory=dict)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    model: GegaConfig = field(default_factory=GegaConfig)
    eval_mode: Optional[str] = None
    seed: int = 0

    def path(self, name: str) -> Optional[Path]:
        value = self.paths.get(name)
        return Path(value) if value else None

    def require_path(self, name: str) -> Path:
        """The path for `name`, which must be set and exist."""
        path = self.path(name)
        if path is None:
            raise ConfigError(name, f"--{name.replace('_', '-')} is required for {self.command}")
        if not path.exists():
            raise ConfigError(name, f"file not found: {path}")
        return path

    def optional_path(self, name: str) -> Optional[Path]:
        path = self.path(name)
        if path is not None and not path.exists():
            raise ConfigError(name, f"file not found: {path}")
        return path

    @property
    def output_dir(self) -> Path:
        return Path(self.paths.get("output_dir") or "runs/latest")

    def to_dict(self) -> dict:
        result = {
            "command": self.command,
            "paths": dict(sorted(self.paths.items())),
            "train": self.train.to_dict(),
            "encoder": self.encoder.to_dict(),
            "model": self.model.to_dict(),
            "eval_mode": self.eval_mode,
            "seed": self.seed,
        }
        if self.stages:
            result["stages"] = {name: cfg.to_dict() for name, cfg in self.stages.items()}
        return result


def load_config_file(path: Optional[Path]) -> Dict[str, Any]:
    """Read a JSON config; a run manifest contributes its "config" section."""
    if path is None:
        return {}
    if not path.exists():
        raise ConfigError("config", f"file not found: {path}")
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"{path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path} must contain a JSON object")
    if "config" in data and "command" in data:
        data = data["config"]
    return data


def _merge_section(name: str, base: Dict[str, Any], *updates: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    merged = dict(base)
    for update in updates:
        for key, value in (update or {}).items():
            if key not in base:
                raise ConfigError(f"{name}.{key}", "unknown setting")
            if value is not None:
                merged[key] = value
    return merged


CONFIG_SECTIONS = ("command", "paths", "train", "stages", "encoder", "model", "eval_mode", "seed", "synth")

# Later training stages of a combined run and the phase each one trains in.
STAGE_PHASES = {"student": PHASE_DISTILL, "finetune": PHASE_FINETUNE}

# Settings a manifest from another phase, or the first stage of a combined run, passes on.
SHARED_TRAIN_FIELDS = ("evi_lambda", "warmup_ratio", "workers", "seed")


def _resolve_train(name: str, phase: str, seed: int, inherited: Optional[Dict[str, Any]],
                   file_train: Optional[Dict[str, Any]], flags: Optional[Dict[str, Any]]) -> TrainConfig:
    """Phase defaults < inherited shared settings < config file < flags."""
    base = TrainConfig.for_phase(phase).to_dict()
    base.update({k: v for k, v in (inherited or {}).items() if k in SHARED_TRAIN_FIELDS})
    file_train = dict(file_train or {})
    if file_train.get("phase", phase) != phase:
        # A manifest from another phase only contributes the phase-independent settings.
        file_train = {k: v for k, v in file_train.items() if k in SHARED_TRAIN_FIELDS}
    values = _merge_section(name, base, file_train, flags)
    values["phase"] = phase
    values["seed"] = seed
    cfg = TrainConfig.from_dict(values)
    try:
        cfg.validate()
    except ValueError as e:
        raise ConfigError(name, str(e)) from None
    return cfg


def resolve_config(command: str, phase: str, config_file: Optional[Path] = None,
                   paths: Optional[Dict[str, Any]] = None, train: Optional[Dict[str, Any]] = None,
                   encoder: Optional[Dict[str, Any]] = None, model: Optional[Dict[str, Any]] = None,
                   eval_mode: Optional[str] = None, seed: Optional[int] = None,
                   stages: Optional[Dict[str, Optional[Dict[str, Any]]]] = None) -> RunConfig:
    """
    Build and validate a RunConfig from defaults, a config file and flags.

    Flag dicts hold None for options not given on the command line. `stages`
    names the later training stages the command runs (see STAGE_PHASES);
    each starts from its phase defaults plus the shared settings of `train`.
    """
    file_config = load_config_file(config_file)
    unknown = set(file_config) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown config section")

    resolved_seed = seed if seed is not None else file_config.get("seed", 0)
    train_config = _resolve_train("train", phase, resolved_seed, None, file_config.get("train"), train)

    file_stages = file_config.get("stages") or {}
    for name in file_stages:
        if name not in STAGE_PHASES:
            raise ConfigError(f"stages.{name}", f"unknown stage; expected one of {sorted(STAGE_PHASES)}")
    stage_configs = {}
    for name, flags in (stages or {}).items():
        stage_configs[name] = _resolve_train(f"stages.{name}", STAGE_PHASES[name], resolved_seed,
                                             train_config.to_dict(), file_stages.get(name), flags)

    path_values = _merge_section("paths", {name: None for name in PATH_FIELDS},
                                 file_config.get("paths"), paths)
    path_values = {k: (str(v) if v is not None else None) for k, v in path_values.items()}
    encoder_values = _merge_section("encoder", EncoderConfig().to_dict(), file_config.get("encoder"), encoder)
    model_values = _merge_section("model", GegaConfig().to_dict(), file_config.get("model"), model)

    resolved_mode = eval_mode if eval_mode is not None else file_config.get("eval_mode")
    if resolved_mode is not None and resolved_mode not in EVAL_MODES:
        raise ConfigError("eval_mode", f"must be one of {EVAL_MODES}, got {resolved_mode!r}")

    return RunConfig(command=command, paths=path_values, train=train_config, stages=stage_configs,
                     encoder=EncoderConfig.from_dict(encoder_values),
                     model=GegaConfig.from_dict(model_values),
                     eval_mode=resolved_mode, seed=resolved_seed)


def resolve_synth_spec(config_file: Optional[Path] = None, flags: Optional[Dict[str, Any]] = None):
    """SynthSpec from its defaults, the "synth" section of a config file and flags."""
    from synthetic import SynthSpec

    file_config = load_config_file(config_file)
    unknown = set(file_config) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown config section")
    values = _merge_section("synth", SynthSpec().to_dict(), file_config.get("synth"), flags)
    spec = SynthSpec.from_dict(values)
    try:
        spec.validate()
    except ValueError as e:
        raise ConfigError("synth", str(e)) from None
    return spec


def _validate_model_config(config: RunConfig) -> None:
    """Check encoder and model settings; vocab_size is filled in later from the data."""
    try:
        replace(config.encoder, vocab_size=max(1, config.encoder.vocab_size)).validate()
    except ValueError as e:
        raise ConfigError("encoder", str(e)) from None
    try:
        config.model.validate(config.encoder.d_model)
    except ValueError as e:
        raise ConfigError("model", str(e)) from None


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

@contextmanager
def _cli_errors():
    """Turn library errors into `Error: ...` and exit status 1."""
    from checkpoint import CheckpointError
    from corpus import CorpusError
    from pipeline import SilverCoverageError, TrainingError

    try:
        yield
    except typer.Exit:
        raise
    except (ConfigError, CorpusError, CheckpointError, TrainingError, SilverCoverageError,
            FileNotFoundError, ValueError, KeyError) as e:
        message = e.args[0] if isinstance(e, KeyError) and e.args else str(e)
        typer.echo(f"Error: {message}", err=True)
        raise typer.Exit(1)


def _inventory(config: RunConfig):
    """Relation inventory from --rel-info, else the default one for --num-class."""
    from corpus import RelationInventory

    rel_info = config.optional_path("rel_info")
    if rel_info is None:
        return RelationInventory.default(config.model.num_class)
    inventory = RelationInventory.from_rel2id(rel_info)
    config.model = replace(config.model, num_class=inventory.num_class)
    return inventory


def _load(config: RunConfig, name: str, inventory, required: bool = True):
    from corpus import load_docred

    path = config.require_path(name) if required else config.optional_path(name)
    if path is None:
        return None
    dataset = load_docred(path, inventory)
    typer.echo(f"Loaded {len(dataset)} documents, {dataset.num_facts()} facts from {path}")
    return dataset


def _start_run(config: RunConfig, no_mlflow: bool):
    from run_manifest import RunManifest, source_revision
    from tracking import RunTracker

    manifest = RunManifest(command=config.command, config=config.to_dict(), seed=config.seed,
                           source=source_revision(get_project_root()))
    for name in PATH_FIELDS:
        path = config.path(name)
        if name != "output_dir" and path is not None and path.is_file():
            manifest.add_input(path)
    tracker = RunTracker(enabled=not no_mlflow, output_dir=config.output_dir)
    tracker.start(config.command, params=manifest.to_mlflow_params(), tags=manifest.to_mlflow_tags())
    return manifest, tracker


def _finish(manifest, tracker, out: Path) -> None:
    """Save the manifest and attach it and every output file to the MLflow run."""
    path = manifest.save(out)
    for output in manifest.outputs.values():
        tracker.log_artifact(output)
    tracker.log_artifact(path)


def _epoch_logger(tracker):
    def log_epoch(summary) -> None:
        tracker.log_metrics({f"{summary.phase}_l_re": summary.l_re, f"{summary.phase}_l_er": summary.l_er,
                             f"{summary.phase}_total": summary.total}, step=summary.epoch)
    return log_epoch


def _report(tracker, report, label: str, prefix: str) -> None:
    typer.echo(f"\n{label}:")
    typer.echo(report.format_block())
    tracker.log_metrics(report.to_mlflow_metrics(prefix))


@contextmanager
def _tracked(tracker):
    try:
        yield
    except BaseException:
        tracker.end(status="FAILED")
        raise
    tracker.end()


def _echo_config(config: RunConfig) -> None:
    t = config.train
    typer.echo(f"{config.command} configuration:")
    typer.echo(f"  Phase: {t.phase}")
    typer.echo(f"  Epochs: {t.epochs}  Batch: {t.batch_size}  Accumulation: {t.gradient_accumulation_steps}")
    typer.echo(f"  Learning rate: {t.lr}  Added layers: {t.added_lr}  Warmup: {t.warmup_ratio}")
    typer.echo(f"  Max grad norm: {t.max_grad_norm}  Evidence lambda: {t.evi_lambda}")
    typer.echo(f"  d_model: {config.encoder.d_model}  Classes: {config.model.num_class}  Seed: {config.seed}")
    typer.echo()


# Option factories; each command gets fresh Option objects.

def _config_option():
    return typer.Option(None, "--config", "-c", help="JSON config file or a previous run's manifest.json")


def _output_option():
    return typer.Option(None, "--output-dir", "-o", help="Run directory for all outputs (default: runs/latest)")


def _seed_option():
    return typer.Option(None, "--seed", help="Random seed (default: 0)")


def _workers_option():
    return typer.Option(None, "--workers", "-w", help="Parallel worker processes (default: 1)")


def _no_mlflow_option():
    return typer.Option(False, "--no-mlflow", help="Skip MLflow logging")


def _dry_run_option():
    return typer.Option(False, "--dry-run", help="Validate config and data without training")


def _verbose_option():
    return typer.Option(False, "--verbose", "-v", help="Print per-epoch losses")


def _train_overrides(epochs, batch_size, lr, lr_added, warmup_ratio, max_grad_norm, evi_lambda,
                     accumulation, test_batch_size, workers) -> Dict[str, Any]:
    return {"epochs": epochs, "batch_size": batch_size, "lr": lr, "lr_added": lr_added,
            "warmup_ratio": warmup_ratio, "max_grad_norm": max_grad_norm, "evi_lambda": evi_lambda,
            "gradient_accumulation_steps": accumulation, "test_batch_size": test_batch_size,
            "workers": workers}


def _model_overrides(num_class, num_labels, evi_thresh, num_heads, gnn_layers, enc_layers,
                     bilinear_groups, no_concentration, no_graphconv, no_transformer) -> Dict[str, Any]:
    return {"num_class": num_class, "num_labels_cap": num_labels, "evi_thresh": evi_thresh,
            "num_heads": num_heads, "gnn_layers": gnn_layers, "enc_layers": enc_layers,
            "bilinear_groups": bilinear_groups,
            "use_attention_concentration": False if no_concentration else None,
            "use_graphconv": False if no_graphconv else None,
            "use_transformer_enc": False if no_transformer else None}


def _encoder_overrides(d_model, encoder_heads, encoder_layers, max_window, ffn_dim) -> Dict[str, Any]:
    return {"d_model": d_model, "num_heads": encoder_heads, "num_layers": encoder_layers,
            "max_window": max_window, "ffn_dim": ffn_dim}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

@app.command()
def synth(
    seed: Optional[int] = typer.Option(None, "--seed",
                                       help="Generator seed; dev and distant use seed+1, seed+2 (default: 7)"),
    docs: Optional[int] = typer.Option(None, "--docs", "-n", help="Documents per split (default: 50)"),
    vocab_size: Optional[int] = typer.Option(None, "--vocab-size", help="Token pool size (default: 64)"),
    relation_types: Optional[int] = typer.Option(None, "--relation-types", help="Planted relation types (default: 4)"),
    sentences: Optional[int] = typer.Option(None, "--sentences", help="Sentences per document (default: 4)"),
    entities: Optional[int] = typer.Option(None, "--entities", help="Entities per document (default: 4)"),
    facts: Optional[int] = typer.Option(None, "--facts", help="Planted facts per document (default: 2)"),
    num_class: Optional[int] = typer.Option(None, "--num-class", help="Relation classes including NA (default: 97)"),
    output_dir: Path = typer.Option(Path("runs/synth"), "--output-dir", "-o", help="Output directory"),
    config_file: Optional[Path] = _config_option(),
):
    """
    Generate a synthetic corpus with planted relations and evidence.

    Writes train.json, dev.json (gold evidence) and distant.json (no evidence).
    The same settings always produce identical files, so `--config` with a
    previous synth manifest.json regenerates them.
    """
    from corpus import emit_docred
    from run_manifest import RunManifest
    from synthetic import generate_synthetic, strip_evidence

    with _cli_errors():
        spec = resolve_synth_spec(config_file, {
            "seed": seed, "num_docs": docs, "vocab_size": vocab_size, "num_relation_types": relation_types,
            "sentences_per_doc": sentences, "entities_per_doc": entities, "facts_per_doc": facts,
            "num_class": num_class})
        manifest = RunManifest(command="synth", config={"synth": spec.to_dict()}, seed=spec.seed)
        splits = {
            "train": generate_synthetic(spec),
            "dev": generate_synthetic(replace(spec, seed=spec.seed + 1)),
            "distant": strip_evidence(generate_synthetic(replace(spec, seed=spec.seed + 2))),
        }
        for name, dataset in splits.items():
            path = output_dir / f"{name}.json"
            emit_docred(dataset, path)
            manifest.add_output(name, path)
            typer.echo(f"Wrote {len(dataset)} documents, {dataset.num_facts()} facts to {path}")
        manifest.save(output_dir)


@app.command("train-teacher")
def train_teacher_command(
    train_file: Optional[Path] = typer.Option(None, "--train-file", help="Annotated training data (DocRED JSON)"),
    dev_file: Optional[Path] = typer.Option(None, "--dev-file", help="Dev data scored after training"),
    distant_file: Optional[Path] = typer.Option(None, "--distant-file",
                                                help="Distant data whose tokens join the vocabulary"),
    rel_info: Optional[Path] = typer.Option(None, "--rel-info", help="rel2id.json relation inventory"),
    num_class: Optional[int] = typer.Option(None, "--num-class", help="Relation classes including NA (default: 97)"),
    num_labels: Optional[int] = typer.Option(None, "--num-labels", help="Max relations per pair (default: 4)"),
    evi_thresh: Optional[float] = typer.Option(None, "--evi-thresh", help="Evidence threshold (default: 0.2)"),
    epochs: Optional[int] = typer.Option(None, "--num-train-epochs", help="Epochs (default: 30)"),
    batch_size: Optional[int] = typer.Option(None, "--train-batch-size", help="Documents per batch (default: 4)"),
    test_batch_size: Optional[int] = typer.Option(None, "--test-batch-size", help="Inference chunk size (default: 8)"),
    lr: Optional[float] = typer.Option(None, "--learning-rate", help="Encoder learning rate (default: 5e-5)"),
    lr_added: Optional[float] = typer.Option(None, "--lr-added", help="Learning rate of the added layers"),
    warmup_ratio: Optional[float] = typer.Option(None, "--warmup-ratio", help="Warmup fraction (default: 0.06)"),
    max_grad_norm: Optional[float] = typer.Option(None, "--max-grad-norm", help="Clip norm (default: 1.0)"),
    evi_lambda: Optional[float] = typer.Option(None, "--evi-lambda", help="Evidence loss weight (default: 0.1)"),
    accumulation: Optional[int] = typer.Option(None, "--gradient-accumulation-steps", help="Batches per update"),
    eval_mode: Optional[str] = typer.Option(None, "--eval-mode", help="single or fusion, for the dev score"),
    d_model: Optional[int] = typer.Option(None, "--d-model", help="Hidden size (default: 64)"),
    encoder_heads: Optional[int] = typer.Option(None, "--encoder-heads", help="Encoder attention heads"),
    encoder_layers: Optional[int] = typer.Option(None, "--encoder-layers", help="Encoder layers"),
    max_window: Optional[int] = typer.Option(None, "--max-window", help="Encoder window in tokens (default: 512)"),
    ffn_dim: Optional[int] = typer.Option(None, "--ffn-dim", help="Feed-forward size"),
    num_heads: Optional[int] = typer.Option(None, "--num-heads", help="GEGA heads (default: 2)"),
    gnn_layers: Optional[int] = typer.Option(None, "--gnn-layers", help="Graph convolution layers (default: 2)"),
    enc_layers: Optional[int] = typer.Option(None, "--enc-layers", help="Transformer-enc layers (default: 3)"),
    bilinear_groups: Optional[int] = typer.Option(None, "--bilinear-groups", help="Bilinear groups (0 = auto)"),
    no_concentration: bool = typer.Option(False, "--no-attention-concentration",
                                          help="Feed encoder attention to the graph convolution"),
    no_graphconv: bool = typer.Option(False, "--no-graphconv", help="Skip Multi-GraphConv"),
    no_transformer: bool = typer.Option(False, "--no-transformer-enc", help="Skip Transformer-enc"),
    seed: Optional[int] = _seed_option(),
    workers: Optional[int] = _workers_option(),
    output_dir: Optional[Path] = _output_option(),
    config_file: Optional[Path] = _config_option(),
    dry_run: bool = _dry_run_option(),
    no_mlflow: bool = _no_mlflow_option(),
    verbose: bool = _verbose_option(),
):
    """
    Step 1: train the teacher on annotated data with gold evidence.

    Writes teacher.json, train_log.jsonl and manifest.json to the run directory.
    """
    from corpus import build_vocabulary
    from gega import GegaModel
    from pipeline import TrainingLog, evaluate_model, train_teacher

    with _cli_errors():
        config = resolve_config(
            "train-teacher", PHASE_TEACHER, config_file,
            paths={"train_file": train_file, "dev_file": dev_file, "distant_file": distant_file,
                   "rel_info": rel_info, "output_dir": output_dir},
            train=_train_overrides(epochs, batch_size, lr, lr_added, warmup_ratio, max_grad_norm, evi_lambda,
                                   accumulation, test_batch_size, workers),
            encoder=_encoder_overrides(d_model, encoder_heads, encoder_layers, max_window, ffn_dim),
            model=_model_overrides(num_class, num_labels, evi_thresh, num_heads, gnn_layers, enc_layers,
                                   bilinear_groups, no_concentration, no_graphconv, no_transformer),
            eval_mode=eval_mode, seed=seed)
        _validate_model_config(config)
        inventory = _inventory(config)
        train = _load(config, "train_file", inventory)
        dev = _load(config, "dev_file", inventory, required=False)
        distant = _load(config, "distant_file", inventory, required=False)
        vocabulary = build_vocabulary([d for d in (train, distant) if d is not None])
        _echo_config(config)

        if dry_run:
            GegaModel(replace(config.encoder, vocab_size=len(vocabulary)), config.model, vocabulary, config.seed)
            typer.echo("Dry run: configuration and data are valid.")
            return

        manifest, tracker = _start_run(config, no_mlflow)
        out = config.output_dir
        with _tracked(tracker):
            teacher = train_teacher(train, config.train, config.encoder, config.model, vocabulary,
                                    log=TrainingLog(out / "train_log.jsonl"), verbose=verbose,
                                    on_epoch=_epoch_logger(tracker))
            teacher.save(out / "teacher.json")
            manifest.add_output("checkpoint", out / "teacher.json")
            manifest.add_output("train_log", out / "train_log.jsonl")
            typer.echo(f"Teacher checkpoint: {out / 'teacher.json'}")
            if dev is not None:
                report = evaluate_model(teacher, dev, config.eval_mode or "single", train,
                                        config.train.workers, config.train.test_batch_size)
                _report(tracker, report, "Dev", "dev_")
            _finish(manifest, tracker, out)


@app.command("infer-silver")
def infer_silver_command(
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Teacher checkpoint"),
    distant_file: Optional[Path] = typer.Option(None, "--distant-file", help="Distantly labeled data"),
    test_batch_size: Optional[int] = typer.Option(None, "--test-batch-size", help="Inference chunk size (default: 4)"),
    seed: Optional[int] = _seed_option(),
    workers: Optional[int] = _workers_option(),
    output_dir: Optional[Path] = _output_option(),
    config_file: Optional[Path] = _config_option(),
    dry_run: bool = _dry_run_option(),
    no_mlflow: bool = _no_mlflow_option(),
):
    """
    Step 2: annotate distant data with the teacher's token importance and evidence.

    Writes silver.json to the run directory.
    """
    from checkpoint import Checkpoint
    from pipeline import infer_silver

    with _cli_errors():
        config = resolve_config(
            "infer-silver", PHASE_DISTILL, config_file,
            paths={"checkpoint": checkpoint, "distant_file": distant_file, "output_dir": output_dir},
            train={"test_batch_size": test_batch_size, "workers": workers}, seed=seed)
        teacher = Checkpoint.load(config.require_path("checkpoint"))
        distant = _load(config, "distant_file", teacher.inventory)
        if dry_run:
            teacher.build_model()
            typer.echo("Dry run: configuration and data are valid.")
            return

        manifest, tracker = _start_run(config, no_mlflow)
        out = config.output_dir
        with _tracked(tracker):
            silver = infer_silver(teacher, distant, config.train.workers, config.train.test_batch_size)
            silver.save(out / "silver.json")
            manifest.add_output("silver", out / "silver.json")
            tracker.log_metrics({"silver_pairs": silver.num_pairs()})
            typer.echo(f"Silver annotations for {silver.num_pairs()} pairs: {out / 'silver.json'}")
            _finish(manifest, tracker, out)


@app.command("train-student")
def train_student_command(
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint",
                                              help="Teacher checkpoint (vocabulary and architecture)"),
    distant_file: Optional[Path] = typer.Option(None, "--distant-file", help="Distantly labeled data"),
    silver_file: Optional[Path] = typer.Option(None, "--silver-file",
                                               help="Silver annotations; omit to train with --evi-lambda 0"),
    epochs: Optional[int] = typer.Option(None, "--num-train-epochs", help="Epochs (default: 2)"),
    batch_size: Optional[int] = typer.Option(None, "--train-batch-size", help="Documents per batch (default: 4)"),
    lr: Optional[float] = typer.Option(None, "--learning-rate", help="Encoder learning rate (default: 3e-5)"),
    lr_added: Optional[float] = typer.Option(None, "--lr-added", help="Learning rate of the added layers"),
    warmup_ratio: Optional[float] = typer.Option(None, "--warmup-ratio", help="Warmup fraction (default: 0.06)"),
    max_grad_norm: Optional[float] = typer.Option(None, "--max-grad-norm", help="Clip norm (default: 5.0)"),
    evi_lambda: Optional[float] = typer.Option(None, "--evi-lambda", help="Evidence loss weight (default: 0.1)"),
    accumulation: Optional[int] = typer.Option(None, "--gradient-accumulation-steps",
                                               help="Batches per update (default: 2)"),
    seed: Optional[int] = _seed_option(),
    workers: Optional[int] = _workers_option(),
    output_dir: Optional[Path] = _output_option(),
    config_file: Optional[Path] = _config_option(),
    dry_run: bool = _dry_run_option(),
    no_mlflow: bool = _no_mlflow_option(),
    verbose: bool = _verbose_option(),
):
    """
    Step 3: train a fresh student on distant data, guided by the teacher's silver annotations.

    Writes student.json to the run directory.
    """
    from checkpoint import Checkpoint
    from pipeline import SilverAnnotation, TrainingLog, train_student

    with _cli_errors():
        config = resolve_config(
            "train-student", PHASE_DISTILL, config_file,
            paths={"checkpoint": checkpoint, "distant_file": distant_file, "silver_file": silver_file,
                   "output_dir": output_dir},
            train=_train_overrides(epochs, batch_size, lr, lr_added, warmup_ratio, max_grad_norm, evi_lambda,
                                   accumulation, None, workers),
            seed=seed)
        teacher = Checkpoint.load(config.require_path("checkpoint"))
        config.encoder, config.model = teacher.encoder_config, teacher.model_config
        distant = _load(config, "distant_file", teacher.inventory)
        silver_path = config.optional_path("silver_file")
        silver = SilverAnnotation.load(silver_path) if silver_path is not None else None
        if silver is None and config.train.evi_lambda > 0:
            raise ConfigError("silver_file", "required unless --evi-lambda is 0")
        _echo_config(config)
        if dry_run:
            typer.echo("Dry run: configuration and data are valid.")
            return

        manifest, tracker = _start_run(config, no_mlflow)
        out = config.output_dir
        with _tracked(tracker):
            student = train_student(distant, silver, config.train, teacher.encoder_config, teacher.model_config,
                                    teacher.vocabulary, log=TrainingLog(out / "train_log.jsonl"),
                                    verbose=verbose, on_epoch=_epoch_logger(tracker))
            student.save(out / "student.json")
            manifest.add_output("checkpoint", out / "student.json")
            manifest.add_output("train_log", out / "train_log.jsonl")
            typer.echo(f"Student checkpoint: {out / 'student.json'}")
            _finish(manifest, tracker, out)


@app.command()
def finetune(
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Student checkpoint"),
    train_file: Optional[Path] = typer.Option(None, "--train-file", help="Annotated training data"),
    dev_file: Optional[Path] = typer.Option(None, "--dev-file", help="Dev data scored before and after"),
    epochs: Optional[int] = typer.Option(None, "--num-train-epochs", help="Epochs (default: 10)"),
    batch_size: Optional[int] = typer.Option(None, "--train-batch-size", help="Documents per batch (default: 4)"),
    test_batch_size: Optional[int] = typer.Option(None, "--test-batch-size", help="Inference chunk size (default: 8)"),
    lr: Optional[float] = typer.Option(None, "--learning-rate", help="Encoder learning rate (default: 1e-6)"),
    lr_added: Optional[float] = typer.Option(None, "--lr-added", help="Added-layer learning rate (default: 3e-6)"),
    warmup_ratio: Optional[float] = typer.Option(None, "--warmup-ratio", help="Warmup fraction (default: 0.06)"),
    max_grad_norm: Optional[float] = typer.Option(None, "--max-grad-norm", help="Clip norm (default: 2.0)"),
    evi_lambda: Optional[float] = typer.Option(None, "--evi-lambda", help="Evidence loss weight (default: 0.1)"),
    accumulation: Optional[int] = typer.Option(None, "--gradient-accumulation-steps", help="Batches per update"),
    eval_mode: Optional[str] = typer.Option(None, "--eval-mode", help="single or fusion, for the dev score"),
    seed: Optional[int] = _seed_option(),
    workers: Optional[int] = _workers_option(),
    output_dir: Optional[Path] = _output_option(),
    config_file: Optional[Path] = _config_option(),
    dry_run: bool = _dry_run_option(),
    no_mlflow: bool = _no_mlflow_option(),
    verbose: bool = _verbose_option(),
):
    """
    Step 4: continue training the student on annotated data.

    Writes final.json to the run directory.
    """
    from checkpoint import Checkpoint
    from pipeline import TrainingLog, evaluate_model, finetune_student

    with _cli_errors():
        config = resolve_config(
            "finetune", PHASE_FINETUNE, config_file,
            paths={"checkpoint": checkpoint, "train_file": train_file, "dev_file": dev_file,
                   "output_dir": output_dir},
            train=_train_overrides(epochs, batch_size, lr, lr_added, warmup_ratio, max_grad_norm, evi_lambda,
                                   accumulation, test_batch_size, workers),
            eval_mode=eval_mode, seed=seed)
        student = Checkpoint.load(config.require_path("checkpoint"))
        config.encoder, config.model = student.encoder_config, student.model_config
        train = _load(config, "train_file", student.inventory)
        dev = _load(config, "dev_file", student.inventory, required=False)
        _echo_config(config)
        if dry_run:
            student.build_model()
            typer.echo("Dry run: configuration and data are valid.")
            return

        manifest, tracker = _start_run(config, no_mlflow)
        out = config.output_dir
        mode = config.eval_mode or "single"
        with _tracked(tracker):
            if dev is not None:
                before = evaluate_model(student, dev, mode, train, config.train.workers, config.train.test_batch_size)
                _report(tracker, before, "Dev before finetuning", "dev_before_")
            final = finetune_student(student, train, config.train, log=TrainingLog(out / "train_log.jsonl"),
                                     verbose=verbose, on_epoch=_epoch_logger(tracker))
            final.save(out / "final.json")
            manifest.add_output("checkpoint", out / "final.json")
            manifest.add_output("train_log", out / "train_log.jsonl")
            typer.echo(f"Finetuned checkpoint: {out / 'final.json'}")
            if dev is not None:
                after = evaluate_model(final, dev, mode, train, config.train.workers, config.train.test_batch_size)
                _report(tracker, after, "Dev after finetuning", "dev_")
            _finish(manifest, tracker, out)


@app.command()
def distill(
    train_file: Optional[Path] = typer.Option(None, "--train-file", help="Annotated training data"),
    distant_file: Optional[Path] = typer.Option(None, "--distant-file", help="Distantly labeled data"),
    dev_file: Optional[Path] = typer.Option(None, "--dev-file", help="Dev data scored at the end"),
    rel_info: Optional[Path] = typer.Option(None, "--rel-info", help="rel2id.json relation inventory"),
    num_class: Optional[int] = typer.Option(None, "--num-class", help="Relation classes including NA (default: 97)"),
    teacher_epochs: Optional[int] = typer.Option(None, "--teacher-epochs", help="Teacher epochs (default: 30)"),
    student_epochs: Optional[int] = typer.Option(None, "--student-epochs", help="Student epochs (default: 2)"),
    finetune_epochs: Optional[int] = typer.Option(None, "--finetune-epochs", help="Finetune epochs (default: 10)"),
    evi_lambda: Optional[float] = typer.Option(None, "--evi-lambda", help="Evidence loss weight (default: 0.1)"),
    d_model: Optional[int] = typer.Option(None, "--d-model", help="Hidden size (default: 64)"),
    skip_self_train: bool = typer.Option(False, "--skip-self-train",
                                         help="Train the student on distant labels only (no silver)"),
    skip_finetune: bool = typer.Option(False, "--skip-finetune", help="Use the student as the final model"),
    eval_mode: Optional[str] = typer.Option(None, "--eval-mode", help="single or fusion, for the dev score"),
    seed: Optional[int] = _seed_option(),
    workers: Optional[int] = _workers_option(),
    output_dir: Optional[Path] = _output_option(),
    config_file: Optional[Path] = _config_option(),
    dry_run: bool = _dry_run_option(),
    no_mlflow: bool = _no_mlflow_option(),
    verbose: bool = _verbose_option(),
):
    """
    Steps 1-4 in one run with per-phase defaults.

    The student and finetune stages read their settings from the config
    file's "stages" section and inherit evi_lambda, warmup_ratio and workers
    from "train". Writes teacher.json, silver.json, student.json and final.json.
    """
    from corpus import build_vocabulary
    from gega import GegaModel
    from pipeline import TrainingLog, evaluate_model, run_distillation

    with _cli_errors():
        config = resolve_config(
            "distill", PHASE_TEACHER, config_file,
            paths={"train_file": train_file, "distant_file": distant_file, "dev_file": dev_file,
                   "rel_info": rel_info, "output_dir": output_dir},
            train={"epochs": teacher_epochs, "evi_lambda": evi_lambda, "workers": workers},
            encoder={"d_model": d_model}, model={"num_class": num_class},
            eval_mode=eval_mode, seed=seed,
            stages={"student": {"epochs": student_epochs}, "finetune": {"epochs": finetune_epochs}})
        _validate_model_config(config)
        inventory = _inventory(config)
        train = _load(config, "train_file", inventory)
        distant = _load(config, "distant_file", inventory)
        dev = _load(config, "dev_file", inventory, required=False)
        distill_cfg, finetune_cfg = config.stages["student"], config.stages["finetune"]
        _echo_config(config)
        if dry_run:
            vocabulary = build_vocabulary([train, distant])
            GegaModel(replace(config.encoder, vocab_size=len(vocabulary)), config.model, vocabulary, config.seed)
            typer.echo("Dry run: configuration and data are valid.")
            return

        manifest, tracker = _start_run(config, no_mlflow)
        out = config.output_dir
        with _tracked(tracker):
            result = run_distillation(train, distant, config.train, distill_cfg, finetune_cfg,
                                      config.encoder, config.model, skip_self_train=skip_self_train,
                                      skip_finetune=skip_finetune, log=TrainingLog(out / "train_log.jsonl"),
                                      verbose=verbose)
            outputs = {"teacher": result.teacher, "student": result.student, "final": result.final}
            for role, checkpoint in outputs.items():
                checkpoint.save(out / f"{role}.json")
                manifest.add_output(role, out / f"{role}.json")
            if result.silver is not None:
                result.silver.save(out / "silver.json")
                manifest.add_output("silver", out / "silver.json")
            typer.echo(f"Checkpoints written to {out}")
            if dev is not None:
                mode = config.eval_mode or "single"
                _report(tracker, evaluate_model(result.teacher, dev, mode, train, config.train.workers),
                        "Teacher on dev", "teacher_dev_")
                _report(tracker, evaluate_model(result.final, dev, mode, train, config.train.workers),
                        "Final model on dev", "dev_")
            _finish(manifest, tracker, out)


@app.command()
def infer(
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Model checkpoint"),
    test_file: Optional[Path] = typer.Option(None, "--test-file", help="Documents to annotate"),
    train_file: Optional[Path] = typer.Option(None, "--train-file", help="Training data for Ign-F1"),
    eval_mode: Optional[str] = typer.Option(None, "--eval-mode", help="single or fusion (required)"),
    test_batch_size: Optional[int] = typer.Option(None, "--test-batch-size", help="Inference chunk size (default: 8)"),
    seed: Optional[int] = _seed_option(),
    workers: Optional[int] = _workers_option(),
    output_dir: Optional[Path] = _output_option(),
    config_file: Optional[Path] = _config_option(),
    dry_run: bool = _dry_run_option(),
    no_mlflow: bool = _no_mlflow_option(),
):
    """
    Predict relations and evidence; writes result.json in the official layout.

    When the test file carries gold facts, the F1/Ign-F1/Evi-F1 block is printed.
    """
    from checkpoint import Checkpoint
    from metrics import emit_official, evaluate
    from pipeline import infer as run_inference

    with _cli_errors():
        config = resolve_config(
            "infer", PHASE_TEACHER, config_file,
            paths={"checkpoint": checkpoint, "test_file": test_file, "train_file": train_file,
                   "output_dir": output_dir},
            train={"test_batch_size": test_batch_size, "workers": workers}, eval_mode=eval_mode, seed=seed)
        if config.eval_mode is None:
            raise ConfigError("eval_mode", f"--eval-mode is required for infer ({' or '.join(EVAL_MODES)})")
        model_checkpoint = Checkpoint.load(config.require_path("checkpoint"))
        config.encoder, config.model = model_checkpoint.encoder_config, model_checkpoint.model_config
        test = _load(config, "test_file", model_checkpoint.inventory)
        train = _load(config, "train_file", model_checkpoint.inventory, required=False)
        model = model_checkpoint.build_model()
        if dry_run:
            typer.echo("Dry run: configuration and data are valid.")
            return

        manifest, tracker = _start_run(config, no_mlflow)
        out = config.output_dir
        with _tracked(tracker):
            predictions = run_inference(model, test, config.eval_mode, config.train.workers,
                                        config.train.test_batch_size)
            emit_official(predictions, model_checkpoint.inventory, out / "result.json")
            manifest.add_output("result", out / "result.json")
            typer.echo(f"{len(predictions)} predictions ({config.eval_mode}): {out / 'result.json'}")
            if test.num_facts() > 0:
                _report(tracker, evaluate(predictions, test, train), "Scores", "test_")
            _finish(manifest, tracker, out)


@app.command("eval")
def eval_command(
    pred: Optional[Path] = typer.Option(None, "--pred", help="Result file in the official layout"),
    gold: Optional[Path] = typer.Option(None, "--gold", help="Gold documents (DocRED JSON)"),
    train_file: Optional[Path] = typer.Option(None, "--train-file", help="Training data for Ign-F1"),
    rel_info: Optional[Path] = typer.Option(None, "--rel-info", help="rel2id.json relation inventory"),
    num_class: Optional[int] = typer.Option(None, "--num-class", help="Relation classes including NA (default: 97)"),
    output_dir: Optional[Path] = typer.Option(None, "--output-dir", "-o",
                                              help="Write eval.json and manifest.json here"),
    config_file: Optional[Path] = _config_option(),
    dry_run: bool = typer.Option(False, "--dry-run", help="Validate config and inputs without scoring"),
    no_mlflow: bool = _no_mlflow_option(),
):
    """
    Score a result file: prints the F1 / Ign-F1 / Evi-F1 block.

    Without --train-file, Ign-F1 equals F1.
    """
    from metrics import evaluate, parse_official

    with _cli_errors():
        config = resolve_config(
            "eval", PHASE_TEACHER, config_file,
            paths={"pred_file": pred, "gold_file": gold, "train_file": train_file, "rel_info": rel_info,
                   "output_dir": output_dir},
            model={"num_class": num_class})
        inventory = _inventory(config)
        predictions = parse_official(config.require_path("pred_file"), inventory)
        gold_data = _load(config, "gold_file", inventory)
        train = _load(config, "train_file", inventory, required=False)
        if dry_run:
            typer.echo(f"Dry run: {len(predictions)} predictions and the gold data are valid.")
            return
        report = evaluate(predictions, gold_data, train)
        typer.echo(report.format_block())

        if config.path("output_dir") is not None:
            manifest, tracker = _start_run(config, no_mlflow)
            out = config.output_dir
            with _tracked(tracker):
                tracker.log_metrics(report.to_mlflow_metrics())
                out.mkdir(parents=True, exist_ok=True)
                with open(out / "eval.json", "w") as f:
                    json.dump(report.to_dict(), f, indent=2, sort_keys=True)
                    f.write("\n")
                manifest.add_output("report", out / "eval.json")
                _finish(manifest, tracker, out)


@app.command()
def mlflow_ui(
    output_dir: Path = typer.Option(Path("runs/latest"), "--output-dir", "-o", help="Run directory holding mlflow.db"),
):
    """
    Start the MLflow UI for a run directory.

    Opens at http://localhost:5000
    """
    import subprocess
    import sys
    from tracking import tracking_uri

    uri = tracking_uri(output_dir)
    typer.echo("Starting MLflow UI at http://localhost:5000")
    typer.echo(f"Database: {uri}")
    typer.echo("Press Ctrl+C to stop")

    result = subprocess.run(
        [sys.executable, "-m", "mlflow", "ui", "--backend-store-uri", uri],
        cwd=get_project_root()
    )
    raise typer.Exit(result.returncode)


if __name__ == "__main__":
    app()
