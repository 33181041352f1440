"""
MLflow tracking for training and evaluation runs.

Each run writes to an SQLite store inside its output directory so runs never
share state by accident.

Usage:
    tracker = RunTracker(enabled=True, output_dir="runs/teacher", experiment="gega")
    tracker.start("train-teacher", params=manifest.to_mlflow_params(), tags=manifest.to_mlflow_tags())
    tracker.log_metrics({"total": 0.42}, step=3)
    tracker.log_artifact("runs/teacher/teacher.json")
    tracker.end()

MLflow UI:
    mlflow ui --backend-store-uri sqlite:///runs/teacher/mlflow.db
"""
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Union

MLFLOW_DB_NAME = "mlflow.db"
MAX_PARAM_LENGTH = 500


def tracking_uri(output_dir: Union[str, Path]) -> str:
    return f"sqlite:///{(Path(output_dir) / MLFLOW_DB_NAME).resolve().as_posix()}"


def flatten_params(params: Dict[str, Any], prefix: str = "") -> Dict[str, str]:
    """Nested config dicts become dotted keys; values are stringified and truncated for MLflow."""
    flat = {}
    for key, value in params.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_params(value, prefix=f"{name}."))
        else:
            flat[name] = str(value)[:MAX_PARAM_LENGTH]
    return flat


class RunTracker:
    """Thin MLflow wrapper; every method is a no-op when tracking is disabled."""

    def __init__(self, enabled: bool, output_dir: Union[str, Path], experiment: str = "gega"):
        self.enabled = enabled
        self.output_dir = Path(output_dir)
        self.experiment = experiment
        self.run_id: Optional[str] = None
        self._mlflow = None

    def start(self, run_name: str, params: Optional[Dict[str, Any]] = None,
              tags: Optional[Dict[str, str]] = None) -> None:
        if not self.enabled:
            return
        import mlflow

        self._mlflow = mlflow
        self.output_dir.mkdir(parents=True, exist_ok=True)
        mlflow.set_tracking_uri(tracking_uri(self.output_dir))
        mlflow.set_experiment(self.experiment)
        run = mlflow.start_run(run_name=run_name)
        self.run_id = run.info.run_id
        if params:
            mlflow.log_params(flatten_params(params))
        if tags:
            mlflow.set_tags(tags)
        mlflow.set_tag("timestamp", datetime.now().isoformat())

    def log_metrics(self, metrics: Dict[str, float], step: Optional[int] = None) -> None:
        if self._mlflow is None:
            return
        self._mlflow.log_metrics({k: float(v) for k, v in metrics.items()}, step=step)

    def log_artifact(self, path: Union[str, Path]) -> None:
        if self._mlflow is None or not Path(path).exists():
            return
        self._mlflow.log_artifact(str(path))

    def end(self, status: str = "FINISHED") -> None:
        if self._mlflow is None:
            return
        print(f"MLflow run logged: {self.run_id}")
        self._mlflow.end_run(status=status)
        self._mlflow = None
