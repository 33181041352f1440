"""
Versioned model checkpoints with named tensors.

A checkpoint is a JSON document:
    {"format": "gega-checkpoint", "version": 1, "phase": ..., "seed": ...,
     "encoder_config": {...}, "model_config": {...},
     "vocabulary": {...}, "inventory": {...},
     "tensors": {name: {"shape": [...], "values": [...]}, ...}}

Floats are written with Python's shortest round-trip repr, so save then load
restores every tensor bit-exactly and the same model always produces the
same bytes.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from corpus import RelationInventory, Vocabulary
from encoder import EncoderConfig
from gega import GegaConfig, GegaModel

CHECKPOINT_FORMAT = "gega-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable checkpoint, unsupported version or config/tensor mismatch."""


@dataclass
class Checkpoint:
    phase: str
    seed: int
    encoder_config: EncoderConfig
    model_config: GegaConfig
    vocabulary: Vocabulary
    inventory: RelationInventory
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.to_dict(include_tensors=False) == other.to_dict(include_tensors=False)
                and list(self.tensors) == list(other.tensors)
                and all(self.tensors[k].shape == other.tensors[k].shape
                        and self.tensors[k].tobytes() == other.tensors[k].tobytes() for k in self.tensors))

    @classmethod
    def from_model(cls, model: GegaModel, phase: str, inventory: RelationInventory) -> 'Checkpoint':
        if model.vocabulary is None:
            raise CheckpointError("Cannot checkpoint a model without a vocabulary")
        return cls(phase=phase, seed=model.seed, encoder_config=model.encoder_config,
                   model_config=model.config, vocabulary=model.vocabulary, inventory=inventory,
                   tensors=model.params.state_dict())

    def build_model(self) -> GegaModel:
        """Recreate the model and load this checkpoint's tensors into it."""
        if self.model_config.num_class != self.inventory.num_class:
            raise CheckpointError(f"Model has {self.model_config.num_class} classes but the relation "
                                  f"inventory has {self.inventory.num_class}")
        model = GegaModel(self.encoder_config, self.model_config, self.vocabulary, seed=self.seed)
        try:
            model.params.load_state_dict(self.tensors)
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"Checkpoint tensors do not match the model: {e}") from None
        return model

    def to_dict(self, include_tensors: bool = True) -> dict:
        result = {
            "format": CHECKPOINT_FORMAT,
            "version": self.version,
            "phase": self.phase,
            "seed": self.seed,
            "encoder_config": self.encoder_config.to_dict(),
            "model_config": self.model_config.to_dict(),
            "vocabulary": self.vocabulary.to_dict(),
            "inventory": self.inventory.to_dict(),
        }
        if include_tensors:
            result["tensors"] = {
                name: {"shape": list(values.shape), "values": values.reshape(-1).tolist()}
                for name, values in self.tensors.items()
            }
        return result

    @classmethod
    def from_dict(cls, data: dict) -> 'Checkpoint':
        if data.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"Not a checkpoint (format={data.get('format')!r})")
        if data.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"Unsupported checkpoint version {data.get('version')!r}; "
                                  f"expected {CHECKPOINT_VERSION}")
        try:
            tensors = {}
            for name, record in data["tensors"].items():
                values = np.array(record["values"], dtype=np.float64)
                tensors[name] = values.reshape(record["shape"])
            return cls(
                phase=data["phase"],
                seed=data["seed"],
                encoder_config=EncoderConfig.from_dict(data["encoder_config"]),
                model_config=GegaConfig.from_dict(data["model_config"]),
                vocabulary=Vocabulary.from_dict(data["vocabulary"]),
                inventory=RelationInventory.from_dict(data["inventory"]),
                tensors=tensors,
            )
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"Malformed checkpoint: {e}") from None

    def save(self, filepath: Union[str, Path]) -> None:
        """Save checkpoint to a JSON file."""
        for name, values in self.tensors.items():
            if not np.isfinite(values).all():
                raise CheckpointError(f"Tensor {name} has non-finite values")
        path = Path(filepath)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f)
            f.write("\n")

    @classmethod
    def load(cls, filepath: Union[str, Path]) -> 'Checkpoint':
        """Load checkpoint from a JSON file."""
        path = Path(filepath)
        if not path.exists():
            raise FileNotFoundError(f"Checkpoint not found: {path}")
        try:
            with open(path, 'r') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"Checkpoint {path} is not valid JSON: {e}") from None
        return cls.from_dict(data)
