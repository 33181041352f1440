"""
Run manifest: what a command was run with and what it produced.

Every CLI command writes manifest.json into its output directory. The manifest
records the full resolved configuration, so `--config <dir>/manifest.json`
re-runs a command with the same settings.
"""
import hashlib
import json
import subprocess
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Dict, Optional, Union

from tracking import flatten_params

MANIFEST_NAME = "manifest.json"


def file_digest(path: Union[str, Path]) -> str:
    """sha256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def parse_git_status(text: str) -> Dict[str, Any]:
    """Commit, branch and dirty flag from `git status --porcelain=v2 --branch` output."""
    source: Dict[str, Any] = {"commit": None, "branch": None, "dirty": False}
    for line in text.splitlines():
        if line.startswith("# branch.oid "):
            oid = line.split(" ", 2)[2]
            source["commit"] = None if oid == "(initial)" else oid
        elif line.startswith("# branch.head "):
            head = line.split(" ", 2)[2]
            source["branch"] = None if head == "(detached)" else head
        elif line and not line.startswith("#"):
            source["dirty"] = True
    return source


def source_revision(cwd: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """The code revision a run used; all fields are empty outside a git checkout."""
    try:
        text = subprocess.check_output(["git", "status", "--porcelain=v2", "--branch"],
                                       cwd=cwd, stderr=subprocess.DEVNULL).decode()
    except (subprocess.CalledProcessError, FileNotFoundError):
        text = ""
    return parse_git_status(text)


@dataclass
class RunManifest:
    """
    For MLflow logging, the config flattens to dotted parameters and
    the command, phase and seed become tags.
    """
    command: str
    config: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    inputs: Dict[str, str] = field(default_factory=dict)     # path -> sha256
    outputs: Dict[str, str] = field(default_factory=dict)    # role -> path
    source: Dict[str, Any] = field(default_factory=dict)     # commit, branch, dirty

    def add_input(self, path: Union[str, Path]) -> None:
        self.inputs[str(path)] = file_digest(path)

    def add_output(self, role: str, path: Union[str, Path]) -> None:
        self.outputs[role] = str(path)

    def to_mlflow_params(self) -> Dict[str, str]:
        params = flatten_params(self.config)
        if self.source:
            params.update(flatten_params(self.source, prefix="git."))
        return params

    def to_mlflow_tags(self) -> Dict[str, str]:
        tags = {"command": self.command, "seed": str(self.seed)}
        phase = self.config.get("train", {}).get("phase")
        if phase:
            tags["phase"] = phase
        return tags

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'RunManifest':
        return cls(command=data["command"], config=data.get("config", {}), seed=data.get("seed", 0),
                   inputs=data.get("inputs", {}), outputs=data.get("outputs", {}),
                   source=data.get("source", {}))

    def save(self, output_dir: Union[str, Path]) -> Path:
        path = Path(output_dir) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    @classmethod
    def load(cls, filepath: Union[str, Path]) -> 'RunManifest':
        path = Path(filepath)
        if path.is_dir():
            path = path / MANIFEST_NAME
        with open(path, 'r') as f:
            return cls.from_dict(json.load(f))
