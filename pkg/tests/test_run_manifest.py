"""
Tests for run manifests and the MLflow tracking wrapper.
"""
import hashlib
import os
import sys

# Add source directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'source'))

from run_manifest import MANIFEST_NAME, RunManifest, file_digest, parse_git_status, source_revision
from tracking import MAX_PARAM_LENGTH, RunTracker, flatten_params, tracking_uri


class TestRunManifest:
    """Manifest contents and persistence."""

    def test_digest(self, tmp_path):
        """file_digest is the sha256 of the file bytes."""
        path = tmp_path / "data.json"
        path.write_bytes(b"[1, 2, 3]\n")
        assert file_digest(path) == hashlib.sha256(b"[1, 2, 3]\n").hexdigest()

    def test_save_load(self, tmp_path):
        """A saved manifest loads back equal, from the file or its directory."""
        data = tmp_path / "train.json"
        data.write_text("[]")
        manifest = RunManifest(command="train-teacher", config={"train": {"phase": "teacher", "epochs": 3}}, seed=4)
        manifest.add_input(data)
        manifest.add_output("checkpoint", tmp_path / "teacher.json")
        path = manifest.save(tmp_path)
        assert path.name == MANIFEST_NAME
        assert RunManifest.load(path) == manifest
        assert RunManifest.load(tmp_path) == manifest

    def test_stable_bytes(self, tmp_path):
        """Saving the same manifest twice gives identical files."""
        manifest = RunManifest(command="synth", config={"synth": {"seed": 7, "num_docs": 50}}, seed=7)
        first = manifest.save(tmp_path / "a").read_bytes()
        second = manifest.save(tmp_path / "b").read_bytes()
        assert first == second

    def test_mlflow_views(self):
        """Params are the flattened config; tags carry command, seed and phase."""
        manifest = RunManifest(command="finetune", config={"train": {"phase": "student-finetune", "lr": 1e-6}},
                               seed=2)
        assert manifest.to_mlflow_params() == {"train.phase": "student-finetune", "train.lr": "1e-06"}
        assert manifest.to_mlflow_tags() == {"command": "finetune", "seed": "2", "phase": "student-finetune"}

    def test_tags_without_phase(self):
        """Commands without a train section have no phase tag."""
        assert "phase" not in RunManifest(command="synth", config={"synth": {}}).to_mlflow_tags()

    def test_source_in_params(self, tmp_path):
        """The recorded revision is logged as git.* parameters and saved with the manifest."""
        source = {"commit": "0a1b2c3d", "branch": "main", "dirty": True}
        manifest = RunManifest(command="infer", config={"eval_mode": "fusion"}, source=source)
        params = manifest.to_mlflow_params()
        assert (params["git.commit"], params["git.branch"], params["git.dirty"]) == ("0a1b2c3d", "main", "True")
        manifest.save(tmp_path)
        assert RunManifest.load(tmp_path).source == source


class TestSourceRevision:
    """Reading the code revision from git status output."""

    def test_clean_checkout(self):
        """Branch headers give commit and branch; no entries means clean."""
        text = "# branch.oid 4f9e2d1c0b\n# branch.head main\n# branch.upstream origin/main\n"
        assert parse_git_status(text) == {"commit": "4f9e2d1c0b", "branch": "main", "dirty": False}

    def test_dirty_checkout(self):
        """Any changed or untracked entry marks the checkout dirty."""
        text = "# branch.oid 4f9e2d1c0b\n# branch.head dev\n? runs/notes.txt\n"
        assert parse_git_status(text)["dirty"] is True

    def test_detached_and_initial(self):
        """A detached head has no branch and a repository without commits has no commit."""
        text = "# branch.oid (initial)\n# branch.head (detached)\n"
        assert parse_git_status(text) == {"commit": None, "branch": None, "dirty": False}

    def test_outside_repository(self):
        """Without git output every field is empty."""
        assert parse_git_status("") == {"commit": None, "branch": None, "dirty": False}

    def test_revision_keys(self, tmp_path):
        """source_revision always reports commit, branch and dirty."""
        assert set(source_revision(tmp_path)) == {"commit", "branch", "dirty"}


class TestTracking:
    """MLflow helpers that need no tracking server."""

    def test_flatten_params(self):
        """Nested dicts become dotted keys with string values."""
        flat = flatten_params({"encoder": {"d_model": 64, "num_heads": 2}, "seed": 0, "paths": {"dev": None}})
        assert flat == {"encoder.d_model": "64", "encoder.num_heads": "2", "seed": "0", "paths.dev": "None"}

    def test_long_values_truncated(self):
        """Values longer than MLflow's limit are cut."""
        flat = flatten_params({"names": "x" * (MAX_PARAM_LENGTH + 50)})
        assert len(flat["names"]) == MAX_PARAM_LENGTH

    def test_tracking_uri(self, tmp_path):
        """The store is an SQLite file inside the run directory."""
        uri = tracking_uri(tmp_path)
        assert uri.startswith("sqlite:///")
        assert uri.endswith("mlflow.db")

    def test_disabled_tracker_is_noop(self, tmp_path):
        """A disabled tracker writes nothing."""
        tracker = RunTracker(enabled=False, output_dir=tmp_path / "run")
        tracker.start("train-teacher", params={"a": 1})
        tracker.log_metrics({"loss": 1.0}, step=1)
        tracker.log_artifact(tmp_path / "missing.json")
        tracker.end()
        assert tracker.run_id is None
        assert not (tmp_path / "run").exists()


    def test_log_artifact_skips_missing_files(self, tmp_path):
        """Existing files reach MLflow; missing ones are skipped."""
        class RecordingMlflow:
            def __init__(self):
                self.paths = []

            def log_artifact(self, path):
                self.paths.append(path)

        tracker = RunTracker(enabled=True, output_dir=tmp_path)
        tracker._mlflow = RecordingMlflow()
        checkpoint = tmp_path / "teacher.json"
        checkpoint.write_text("{}")
        tracker.log_artifact(checkpoint)
        tracker.log_artifact(tmp_path / "missing.json")
        assert tracker._mlflow.paths == [str(checkpoint)]
