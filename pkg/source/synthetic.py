"""
Synthetic DocRED-style corpora with planted relations and evidence.

Every planted fact lives in its own evidence sentence as the pattern
`<head name> <trigger> <tail name>` surrounded by filler tokens. Trigger
tokens appear nowhere else, so each fact is recoverable exactly from its
evidence sentence. The remaining sentences each carry one extra mention of
some entity and no trigger.

Usage:
    spec = SynthSpec(seed=7, num_docs=50)
    dataset = generate_synthetic(spec)
    emit_docred(dataset, "synth/train.json")
"""
from dataclasses import dataclass, asdict, fields
from typing import List

import numpy as np

from corpus import Dataset, Document, Entity, Mention, RelationFact, RelationInventory


@dataclass
class SynthSpec:
    """Generator settings; the same settings always yield the same corpus."""
    seed: int = 7
    num_docs: int = 50
    vocab_size: int = 64
    num_relation_types: int = 4
    sentences_per_doc: int = 4
    entities_per_doc: int = 4
    facts_per_doc: int = 2
    sentence_length: int = 6
    num_class: int = 97
    with_evidence: bool = True

    @property
    def name_pool_size(self) -> int:
        return 2 * self.entities_per_doc

    @property
    def num_fillers(self) -> int:
        return self.vocab_size - self.num_relation_types - self.name_pool_size

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name not in ("seed", "with_evidence") and value <= 0:
                raise ValueError(f"SynthSpec.{f.name} must be positive, got {value}")
        if self.num_relation_types > self.num_class - 1:
            raise ValueError(
                f"num_relation_types ({self.num_relation_types}) must fit in num_class - 1 "
                f"({self.num_class - 1}); id 0 is NA")
        if self.entities_per_doc < 2 * self.facts_per_doc:
            raise ValueError("Each planted fact needs its own two entities: "
                             f"entities_per_doc >= {2 * self.facts_per_doc}")
        if self.sentences_per_doc < self.facts_per_doc:
            raise ValueError("Each planted fact needs its own evidence sentence: "
                             f"sentences_per_doc >= {self.facts_per_doc}")
        if self.sentence_length < 3:
            raise ValueError("sentence_length must hold the 3-token pattern")
        if self.num_fillers < 1:
            raise ValueError(
                f"vocab_size {self.vocab_size} too small: {self.num_relation_types} triggers and "
                f"{self.name_pool_size} entity names leave no filler tokens")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'SynthSpec':
        return cls(**{f.name: data[f.name] for f in fields(cls) if f.name in data})


def trigger_token(relation: int) -> str:
    return f"rel{relation}"


def _filler_sentence(rng: np.random.Generator, fillers: List[str], length: int) -> List[str]:
    return [fillers[i] for i in rng.integers(0, len(fillers), size=length)]


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Generate spec.num_docs documents deterministically from spec.seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    names = [f"ent{i}" for i in range(spec.name_pool_size)]
    fillers = [f"w{i}" for i in range(spec.num_fillers)]
    inventory = RelationInventory.default(spec.num_class)

    documents = []
    for doc_idx in range(spec.num_docs):
        doc_names = [names[i] for i in rng.permutation(len(names))[:spec.entities_per_doc]]
        sentence_order = rng.permutation(spec.sentences_per_doc)
        entity_order = rng.permutation(spec.entities_per_doc)

        sentences: List[List[str]] = [[] for _ in range(spec.sentences_per_doc)]
        mentions: List[List[Mention]] = [[] for _ in range(spec.entities_per_doc)]
        facts = []
        for k in range(spec.facts_per_doc):
            sent_id = int(sentence_order[k])
            head, tail = int(entity_order[2 * k]), int(entity_order[2 * k + 1])
            relation = int(rng.integers(1, spec.num_relation_types + 1))
            sentence = _filler_sentence(rng, fillers, spec.sentence_length - 3)
            offset = int(rng.integers(0, len(sentence) + 1))
            sentence[offset:offset] = [doc_names[head], trigger_token(relation), doc_names[tail]]
            sentences[sent_id] = sentence
            mentions[head].append(Mention(sent_id, offset, offset + 1, doc_names[head]))
            mentions[tail].append(Mention(sent_id, offset + 2, offset + 3, doc_names[tail]))
            evidence = [sent_id] if spec.with_evidence else []
            facts.append(RelationFact(head=head, tail=tail, relation=relation, evidence=evidence))

        for sent_id in (int(s) for s in sentence_order[spec.facts_per_doc:]):
            entity = int(rng.integers(0, spec.entities_per_doc))
            sentence = _filler_sentence(rng, fillers, spec.sentence_length - 1)
            offset = int(rng.integers(0, len(sentence) + 1))
            sentence.insert(offset, doc_names[entity])
            sentences[sent_id] = sentence
            mentions[entity].append(Mention(sent_id, offset, offset + 1, doc_names[entity]))

        # Entities not placed yet get a mention in a random non-evidence position.
        for e_idx in range(spec.entities_per_doc):
            if not mentions[e_idx]:
                sent_id = int(rng.integers(0, spec.sentences_per_doc))
                sentences[sent_id].append(doc_names[e_idx])
                end = len(sentences[sent_id])
                mentions[e_idx].append(Mention(sent_id, end - 1, end, doc_names[e_idx]))

        entities = [Entity(mentions=sorted(m, key=lambda x: (x.sent_id, x.start)), entity_type="ENT")
                    for m in mentions]
        facts.sort(key=lambda f: (f.head, f.tail, f.relation))
        documents.append(Document(title=f"synth-{spec.seed}-{doc_idx}", sentences=sentences,
                                  entities=entities, facts=facts))

    dataset = Dataset(documents=documents, inventory=inventory)
    for i, doc in enumerate(dataset):
        doc.validate(inventory.num_class, i)
    return dataset


def strip_evidence(dataset: Dataset) -> Dataset:
    """Copy of the dataset with every fact's evidence removed (distant-style labels)."""
    documents = [
        Document(title=doc.title, sentences=[list(s) for s in doc.sentences], entities=doc.entities,
                 facts=[RelationFact(f.head, f.tail, f.relation, []) for f in doc.facts])
        for doc in dataset
    ]
    return Dataset(documents=documents, inventory=dataset.inventory)
