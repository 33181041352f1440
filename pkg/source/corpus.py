"""
DocRED-format corpus objects, flat token indices and evidence vectors.

Documents follow the public DocRED schema:
    {"title": str,
     "sents": [[token, ...], ...],
     "vertexSet": [[{"name", "sent_id", "pos": [start, end], "type"}, ...], ...],
     "labels": [{"h", "t", "r", "evidence": [sent_id, ...]}, ...]}

Usage:
    dataset = load_docred("data/train_annotated.json")
    flat = flatten(dataset[0])
    z = evidence_vector(dataset[0].facts_for_pair(0, 1), dataset[0].num_sentences)
"""
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np


PAD = "[PAD]"
UNK = "[UNK]"
CLS = "[CLS]"
SEP = "[SEP]"
MARK = "[MARK]"
SPECIAL_TOKENS = [PAD, UNK, CLS, SEP, MARK]

NA_RELATION = 0
NA_NAME = "Na"


class CorpusError(ValueError):
    """Malformed or inconsistent corpus record."""

    def __init__(self, message: str, doc_index: Optional[int] = None, field: Optional[str] = None):
        self.doc_index = doc_index
        self.field = field
        location = []
        if doc_index is not None:
            location.append(f"document {doc_index}")
        if field is not None:
            location.append(f"field '{field}'")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(prefix + message)


@dataclass
class RelationInventory:
    """Relation names indexed by id; id 0 is the NA / threshold class."""
    names: List[str]

    def __post_init__(self):
        if not self.names or self.names[0] != NA_NAME:
            raise ValueError(f"Relation inventory must start with {NA_NAME!r}")
        if len(set(self.names)) != len(self.names):
            raise ValueError("Relation inventory has duplicate names")
        self._ids = {name: i for i, name in enumerate(self.names)}

    @classmethod
    def default(cls, num_class: int = 97) -> 'RelationInventory':
        if num_class < 2:
            raise ValueError(f"num_class must be at least 2, got {num_class}")
        return cls([NA_NAME] + [f"R{i}" for i in range(1, num_class)])

    @classmethod
    def from_rel2id(cls, path: Union[str, Path]) -> 'RelationInventory':
        """Load a DocRED rel2id.json ({"Na": 0, "P17": 1, ...})."""
        with open(path) as f:
            mapping = json.load(f)
        names = [None] * len(mapping)
        for name, idx in mapping.items():
            if not 0 <= idx < len(mapping) or names[idx] is not None:
                raise ValueError(f"rel2id ids must be a permutation of 0..{len(mapping) - 1}")
            names[idx] = name
        return cls(names)

    @property
    def num_class(self) -> int:
        return len(self.names)

    def id_of(self, name: str) -> int:
        return self._ids[name]

    def name_of(self, relation: int) -> str:
        return self.names[relation]

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, RelationInventory) and self.names == other.names

    def to_dict(self) -> dict:
        return {"names": list(self.names)}

    @classmethod
    def from_dict(cls, data: dict) -> 'RelationInventory':
        return cls(list(data["names"]))


@dataclass
class Mention:
    """One occurrence of an entity: a [start, end) span inside sentence sent_id."""
    sent_id: int
    start: int
    end: int
    name: str
    mention_type: str = ""

    @property
    def span(self) -> Tuple[int, int]:
        return (self.start, self.end)


@dataclass
class Entity:
    mentions: List[Mention]
    entity_type: str = ""

    @property
    def names(self) -> List[str]:
        return [m.name for m in self.mentions]


@dataclass
class RelationFact:
    """Relation quadruplet (head, tail, relation, evidence sentences)."""
    head: int
    tail: int
    relation: int
    evidence: List[int] = field(default_factory=list)

    def __post_init__(self):
        self.evidence = sorted(set(int(e) for e in self.evidence))


@dataclass
class Document:
    title: str
    sentences: List[List[str]]
    entities: List[Entity]
    facts: List[RelationFact] = field(default_factory=list)

    @property
    def num_sentences(self) -> int:
        return len(self.sentences)

    def pairs(self) -> List[Tuple[int, int]]:
        """All ordered entity pairs (head, tail) with head != tail."""
        n = len(self.entities)
        return [(h, t) for h in range(n) for t in range(n) if h != t]

    def facts_by_pair(self) -> Dict[Tuple[int, int], List[RelationFact]]:
        grouped: Dict[Tuple[int, int], List[RelationFact]] = defaultdict(list)
        for fact in self.facts:
            grouped[(fact.head, fact.tail)].append(fact)
        return dict(grouped)

    def facts_for_pair(self, head: int, tail: int) -> List[RelationFact]:
        return [f for f in self.facts if f.head == head and f.tail == tail]

    def validate(self, num_class: int, doc_index: Optional[int] = None) -> None:
        """Raise CorpusError if any index points outside the document."""
        if not self.sentences:
            raise CorpusError("document has no sentences", doc_index, "sents")
        for e_idx, entity in enumerate(self.entities):
            if not entity.mentions:
                raise CorpusError(f"entity {e_idx} has no mentions", doc_index, "vertexSet")
            for mention in entity.mentions:
                where = f"vertexSet[{e_idx}]"
                if not 0 <= mention.sent_id < len(self.sentences):
                    raise CorpusError(f"sent_id {mention.sent_id} out of range", doc_index, where)
                if not 0 <= mention.start < mention.end <= len(self.sentences[mention.sent_id]):
                    raise CorpusError(
                        f"span {list(mention.span)} outside sentence {mention.sent_id}", doc_index, where)
        for f_idx, fact in enumerate(self.facts):
            where = f"labels[{f_idx}]"
            for role, idx in (("h", fact.head), ("t", fact.tail)):
                if not 0 <= idx < len(self.entities):
                    raise CorpusError(
                        f"{role}={idx} but document has {len(self.entities)} entities", doc_index, where)
            if fact.head == fact.tail:
                raise CorpusError("head and tail are the same entity", doc_index, where)
            if not 0 < fact.relation < num_class:
                raise CorpusError(f"relation id {fact.relation} outside [1, {num_class})", doc_index, where)
            for ev in fact.evidence:
                if not 0 <= ev < len(self.sentences):
                    raise CorpusError(f"evidence sentence {ev} out of range", doc_index, where)


@dataclass
class Dataset:
    documents: List[Document]
    inventory: RelationInventory

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    def __getitem__(self, index: int) -> Document:
        return self.documents[index]

    @property
    def num_class(self) -> int:
        return self.inventory.num_class

    def by_title(self) -> Dict[str, Document]:
        return {doc.title: doc for doc in self.documents}

    def num_facts(self) -> int:
        return sum(len(doc.facts) for doc in self.documents)


# ---------------------------------------------------------------------------
# DocRED JSON
# ---------------------------------------------------------------------------

def _require(data: dict, key: str, kind, doc_index: int, where: Optional[str] = None):
    if key not in data:
        raise CorpusError("missing", doc_index, where or key)
    if not isinstance(data[key], kind):
        raise CorpusError(f"expected {kind.__name__}, got {type(data[key]).__name__}", doc_index, where or key)
    return data[key]


def _resolve_relation(value: Any, inventory: RelationInventory, doc_index: int, where: str) -> int:
    if isinstance(value, bool):
        raise CorpusError(f"invalid relation {value!r}", doc_index, where)
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        if value not in inventory:
            raise CorpusError(f"unknown relation name {value!r}", doc_index, where)
        return inventory.id_of(value)
    raise CorpusError(f"invalid relation {value!r}", doc_index, where)


def document_from_dict(data: dict, inventory: RelationInventory, doc_index: int = 0) -> Document:
    """Parse and validate one DocRED record."""
    if not isinstance(data, dict):
        raise CorpusError("record is not an object", doc_index)
    title = _require(data, "title", str, doc_index)
    sents = _require(data, "sents", list, doc_index)
    for s_idx, sent in enumerate(sents):
        if not isinstance(sent, list) or not all(isinstance(tok, str) for tok in sent):
            raise CorpusError("sentence is not a list of strings", doc_index, f"sents[{s_idx}]")

    entities = []
    for e_idx, vertex in enumerate(_require(data, "vertexSet", list, doc_index)):
        where = f"vertexSet[{e_idx}]"
        if not isinstance(vertex, list):
            raise CorpusError("entity is not a list of mentions", doc_index, where)
        mentions = []
        entity_type = ""
        for mention in vertex:
            try:
                start, end = mention["pos"]
                mentions.append(Mention(sent_id=int(mention["sent_id"]), start=int(start), end=int(end),
                                        name=str(mention["name"]), mention_type=str(mention.get("type", ""))))
            except (KeyError, TypeError, ValueError) as e:
                raise CorpusError(f"malformed mention ({e})", doc_index, where) from None
            entity_type = entity_type or mentions[-1].mention_type
        entities.append(Entity(mentions=mentions, entity_type=entity_type))

    facts = []
    for f_idx, label in enumerate(data.get("labels", [])):
        where = f"labels[{f_idx}]"
        try:
            head, tail, raw_relation = label["h"], label["t"], label["r"]
        except (KeyError, TypeError):
            raise CorpusError("label needs h, t and r", doc_index, where) from None
        if not isinstance(head, int) or not isinstance(tail, int):
            raise CorpusError("h and t must be entity indices", doc_index, where)
        evidence = label.get("evidence", [])
        if not isinstance(evidence, list) or not all(isinstance(e, int) for e in evidence):
            raise CorpusError("evidence must be a list of sentence indices", doc_index, where)
        relation = _resolve_relation(raw_relation, inventory, doc_index, where)
        facts.append(RelationFact(head=head, tail=tail, relation=relation, evidence=evidence))

    doc = Document(title=title, sentences=[list(s) for s in sents], entities=entities, facts=facts)
    doc.validate(inventory.num_class, doc_index)
    return doc


def document_to_dict(doc: Document, inventory: RelationInventory) -> dict:
    return {
        "title": doc.title,
        "sents": [list(s) for s in doc.sentences],
        "vertexSet": [
            [{"name": m.name, "sent_id": m.sent_id, "pos": [m.start, m.end],
              "type": m.mention_type or entity.entity_type}
             for m in entity.mentions]
            for entity in doc.entities
        ],
        "labels": [
            {"h": f.head, "t": f.tail, "r": inventory.name_of(f.relation), "evidence": list(f.evidence)}
            for f in doc.facts
        ],
    }


def load_docred(path: Union[str, Path], inventory: Optional[RelationInventory] = None,
                num_class: int = 97) -> Dataset:
    """
    Load and validate a DocRED-format JSON file.

    Args:
        path: JSON array of documents
        inventory: relation names; defaults to "Na", "R1", ... for num_class ids
        num_class: class count used when no inventory is given

    Returns:
        Dataset
    """
    inventory = inventory or RelationInventory.default(num_class)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Corpus file not found: {path}")
    try:
        with open(path) as f:
            records = json.load(f)
    except json.JSONDecodeError as e:
        raise CorpusError(f"invalid JSON in {path}: {e}") from None
    if not isinstance(records, list):
        raise CorpusError(f"{path} must contain a JSON array of documents")
    documents = [document_from_dict(record, inventory, i) for i, record in enumerate(records)]
    return Dataset(documents=documents, inventory=inventory)


def emit_docred(dataset: Dataset, path: Union[str, Path]) -> None:
    """Write the dataset in DocRED schema; load_docred reads it back unchanged."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = [document_to_dict(doc, dataset.inventory) for doc in dataset.documents]
    with open(path, "w") as f:
        json.dump(records, f, indent=1)
        f.write("\n")


# ---------------------------------------------------------------------------
# Flat index
# ---------------------------------------------------------------------------

@dataclass
class FlatIndex:
    """
    Token sequence [CLS] s_0 ... s_{n-1} [SEP] with a [MARK] before and after
    every mention.

    sentence_spans[j] is the [start, end) range of sentence j (markers
    included); mention_positions[e][m] is the flat position of the opening
    marker of mention m of entity e; token_sentence maps each flat position
    to its sentence, or -1 for [CLS] / [SEP].
    """
    flat_tokens: List[str]
    sentence_spans: List[Tuple[int, int]]
    mention_positions: List[List[int]]
    token_sentence: List[int]

    @property
    def num_tokens(self) -> int:
        return len(self.flat_tokens)

    @property
    def num_sentences(self) -> int:
        return len(self.sentence_spans)

    def sentence_of(self, position: int) -> int:
        return self.token_sentence[position]

    def content_mask(self) -> np.ndarray:
        """Boolean mask of flat positions that belong to a sentence."""
        return np.array([s >= 0 for s in self.token_sentence], dtype=bool)

    def sentence_membership(self) -> np.ndarray:
        """(tokens, sentences) 0/1 matrix; row t is one-hot on t's sentence."""
        membership = np.zeros((self.num_tokens, self.num_sentences))
        for position, sent in enumerate(self.token_sentence):
            if sent >= 0:
                membership[position, sent] = 1.0
        return membership


def flatten(doc: Document) -> FlatIndex:
    """Build the flat token index of a document with mention markers."""
    opens: Dict[Tuple[int, int], List[Tuple[int, int]]] = defaultdict(list)
    closes: Dict[Tuple[int, int], int] = defaultdict(int)
    for e_idx, entity in enumerate(doc.entities):
        for m_idx, mention in enumerate(entity.mentions):
            opens[(mention.sent_id, mention.start)].append((e_idx, m_idx))
            closes[(mention.sent_id, mention.end)] += 1

    tokens = [CLS]
    token_sentence = [-1]
    spans = []
    positions: List[List[int]] = [[-1] * len(entity.mentions) for entity in doc.entities]
    for s_idx, sentence in enumerate(doc.sentences):
        start = len(tokens)
        for i in range(len(sentence) + 1):
            # Closing markers precede opening ones so adjacent mentions stay disjoint.
            for _ in range(closes.get((s_idx, i), 0)):
                tokens.append(MARK)
                token_sentence.append(s_idx)
            if i == len(sentence):
                break
            for e_idx, m_idx in sorted(opens.get((s_idx, i), [])):
                positions[e_idx][m_idx] = len(tokens)
                tokens.append(MARK)
                token_sentence.append(s_idx)
            tokens.append(sentence[i])
            token_sentence.append(s_idx)
        spans.append((start, len(tokens)))
    tokens.append(SEP)
    token_sentence.append(-1)
    return FlatIndex(flat_tokens=tokens, sentence_spans=spans,
                     mention_positions=positions, token_sentence=token_sentence)


# ---------------------------------------------------------------------------
# Evidence
# ---------------------------------------------------------------------------

def evidence_vector(facts: Iterable[RelationFact], num_sentences: int) -> Optional[np.ndarray]:
    """
    Gold evidence distribution for one entity pair.

    The indicator is the union of the evidence of every fact given, normalized
    to sum to 1. Returns None when no fact carries evidence.
    """
    if num_sentences < 1:
        raise ValueError(f"num_sentences must be at least 1, got {num_sentences}")
    indicator = np.zeros(num_sentences)
    for fact in facts:
        for sent in fact.evidence:
            if not 0 <= sent < num_sentences:
                raise ValueError(f"Evidence sentence {sent} out of range for {num_sentences} sentences")
            indicator[sent] = 1.0
    total = indicator.sum()
    if total == 0:
        return None
    return indicator / total


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

@dataclass
class Vocabulary:
    tokens: List[str]

    def __post_init__(self):
        if self.tokens[:len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError(f"Vocabulary must start with {SPECIAL_TOKENS}")
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ValueError("Vocabulary has duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id_of(self, token: str) -> int:
        return self._ids.get(token, self._ids[UNK])

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.id_of(tok) for tok in tokens]

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, data: dict) -> 'Vocabulary':
        return cls(list(data["tokens"]))


def build_vocabulary(datasets: Iterable[Dataset]) -> Vocabulary:
    """Reserved tokens followed by every corpus token in sorted order."""
    seen = set()
    for dataset in datasets:
        for doc in dataset:
            for sentence in doc.sentences:
                seen.update(sentence)
    seen.difference_update(SPECIAL_TOKENS)
    return Vocabulary(SPECIAL_TOKENS + sorted(seen))
