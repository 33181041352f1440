"""
Tests for DocRED loading, flattening, evidence vectors and the vocabulary.
"""
import json
import os
import sys

import numpy as np
import pytest

# Add source directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'source'))

from corpus import (
    CLS, SEP, MARK, UNK, SPECIAL_TOKENS, CorpusError, Dataset, Document, Entity, Mention,
    RelationFact, RelationInventory, Vocabulary, build_vocabulary, emit_docred,
    evidence_vector, flatten, load_docred,
)


def make_record(**overrides) -> dict:
    """A 3-sentence, 2-entity DocRED record with one labeled fact."""
    record = {
        "title": "Doc",
        "sents": [["Alice", "met", "Bob"], ["They", "talked"], ["Bob", "left"]],
        "vertexSet": [
            [{"name": "Alice", "sent_id": 0, "pos": [0, 1], "type": "PER"}],
            [{"name": "Bob", "sent_id": 0, "pos": [2, 3], "type": "PER"},
             {"name": "Bob", "sent_id": 2, "pos": [0, 1], "type": "PER"}],
        ],
        "labels": [{"h": 0, "t": 1, "r": "R3", "evidence": [0, 1]}],
    }
    record.update(overrides)
    return record


def write_records(tmp_path, records) -> str:
    path = tmp_path / "docs.json"
    path.write_text(json.dumps(records))
    return str(path)


def simple_doc(sentences, mentions=()) -> Document:
    """Document with one single-mention entity per (sent_id, start, end)."""
    entities = [Entity([Mention(s, a, b, f"m{i}")]) for i, (s, a, b) in enumerate(mentions)]
    return Document(title="t", sentences=sentences, entities=entities)


class TestLoadDocred:
    """Loading and validation."""

    def test_single_document(self, tmp_path):
        """A 1-document file with 2 entities and 1 fact loads directly."""
        dataset = load_docred(write_records(tmp_path, [make_record()]))
        assert len(dataset) == 1
        doc = dataset[0]
        assert len(doc.entities) == 2
        assert len(doc.facts) == 1
        assert doc.facts[0].relation == 3
        assert doc.entities[1].entity_type == "PER"

    def test_evidence_kept(self, tmp_path):
        """Evidence [0, 1] over 3 sentences is preserved."""
        dataset = load_docred(write_records(tmp_path, [make_record()]))
        assert dataset[0].facts[0].evidence == [0, 1]

    def test_missing_evidence_is_empty(self, tmp_path):
        """Labels without an evidence field load with empty evidence."""
        record = make_record(labels=[{"h": 0, "t": 1, "r": 2}])
        dataset = load_docred(write_records(tmp_path, [record]))
        assert dataset[0].facts[0].evidence == []

    def test_missing_labels_allowed(self, tmp_path):
        """Test-split documents without labels load with no facts."""
        record = make_record()
        del record["labels"]
        assert load_docred(write_records(tmp_path, [record]))[0].facts == []

    def test_entity_index_out_of_range(self, tmp_path):
        """A fact pointing at entity 9 in a 2-entity document is rejected."""
        record = make_record(labels=[{"h": 0, "t": 9, "r": 1, "evidence": []}])
        with pytest.raises(CorpusError) as excinfo:
            load_docred(write_records(tmp_path, [make_record(), record]))
        assert excinfo.value.doc_index == 1
        assert excinfo.value.field == "labels[0]"

    def test_mention_outside_sentence(self, tmp_path):
        """A mention span past the end of its sentence is rejected."""
        record = make_record()
        record["vertexSet"][0][0]["pos"] = [2, 5]
        with pytest.raises(CorpusError) as excinfo:
            load_docred(write_records(tmp_path, [record]))
        assert excinfo.value.field == "vertexSet[0]"

    def test_evidence_out_of_range(self, tmp_path):
        """Evidence sentence indices must exist."""
        record = make_record(labels=[{"h": 0, "t": 1, "r": 1, "evidence": [3]}])
        with pytest.raises(CorpusError):
            load_docred(write_records(tmp_path, [record]))

    def test_missing_field(self, tmp_path):
        """A record without sents names the field."""
        record = make_record()
        del record["sents"]
        with pytest.raises(CorpusError) as excinfo:
            load_docred(write_records(tmp_path, [record]))
        assert excinfo.value.field == "sents"
        assert excinfo.value.doc_index == 0

    def test_na_relation_rejected(self, tmp_path):
        """Stored facts may not carry the NA id."""
        record = make_record(labels=[{"h": 0, "t": 1, "r": 0}])
        with pytest.raises(CorpusError):
            load_docred(write_records(tmp_path, [record]))

    def test_unknown_relation_name(self, tmp_path):
        """Relation names must be in the inventory."""
        record = make_record(labels=[{"h": 0, "t": 1, "r": "P17"}])
        with pytest.raises(CorpusError):
            load_docred(write_records(tmp_path, [record]))

    def test_not_an_array(self, tmp_path):
        """The file must hold an array."""
        path = tmp_path / "bad.json"
        path.write_text("{}")
        with pytest.raises(CorpusError):
            load_docred(str(path))

    def test_missing_file(self, tmp_path):
        """A missing file raises FileNotFoundError naming the path."""
        with pytest.raises(FileNotFoundError, match="nope.json"):
            load_docred(str(tmp_path / "nope.json"))

    def test_rel2id_inventory(self, tmp_path):
        """Relation codes resolve through a rel2id mapping."""
        rel2id = tmp_path / "rel2id.json"
        rel2id.write_text(json.dumps({"Na": 0, "P17": 1, "P131": 2}))
        inventory = RelationInventory.from_rel2id(str(rel2id))
        record = make_record(labels=[{"h": 0, "t": 1, "r": "P131", "evidence": [2]}])
        dataset = load_docred(write_records(tmp_path, [record]), inventory=inventory)
        assert dataset[0].facts[0].relation == 2
        assert dataset.num_class == 3

    def test_emit_round_trip(self, tmp_path):
        """load_docred(emit_docred(dataset)) reproduces the dataset."""
        dataset = load_docred(write_records(tmp_path, [make_record(), make_record(title="Other")]))
        out = tmp_path / "out" / "emitted.json"
        emit_docred(dataset, out)
        assert load_docred(str(out)) == dataset

    def test_mention_types_kept(self, tmp_path):
        """Each mention keeps its own type through load and emit."""
        record = make_record()
        record["vertexSet"][1][1]["type"] = "ORG"
        dataset = load_docred(write_records(tmp_path, [record]))
        bob = dataset[0].entities[1]
        assert [m.mention_type for m in bob.mentions] == ["PER", "ORG"]
        assert bob.entity_type == "PER"
        out = tmp_path / "emitted.json"
        emit_docred(dataset, out)
        emitted = json.loads(out.read_text())[0]["vertexSet"][1]
        assert [m["type"] for m in emitted] == ["PER", "ORG"]


class TestRelationInventory:
    """Relation name/id mapping."""

    def test_default_names(self):
        """Default inventory is Na, R1, R2, ..."""
        inventory = RelationInventory.default(4)
        assert inventory.names == ["Na", "R1", "R2", "R3"]
        assert inventory.id_of("R2") == 2

    def test_must_start_with_na(self):
        """Index 0 is reserved for Na."""
        with pytest.raises(ValueError):
            RelationInventory(["P17", "Na"])


class TestFlatten:
    """Flat token index construction."""

    def test_no_entities(self):
        """Sentences are wrapped by CLS/SEP with contiguous spans."""
        flat = flatten(simple_doc([["a", "b"], ["c"]]))
        assert flat.flat_tokens == [CLS, "a", "b", "c", SEP]
        assert flat.sentence_spans == [(1, 3), (3, 4)]
        assert flat.token_sentence == [-1, 0, 0, 1, -1]

    def test_single_mention_markers(self):
        """A mention is surrounded by two markers; its position is the opening one."""
        flat = flatten(simple_doc([["a", "b"], ["c"]], [(0, 1, 2)]))
        assert flat.flat_tokens == [CLS, "a", MARK, "b", MARK, "c", SEP]
        assert flat.mention_positions == [[2]]
        assert flat.sentence_spans == [(1, 5), (5, 6)]

    def test_adjacent_mentions(self):
        """Adjacent mentions close before the next one opens."""
        flat = flatten(simple_doc([["x", "y", "z"]], [(0, 0, 1), (0, 1, 2)]))
        assert flat.flat_tokens == [CLS, MARK, "x", MARK, MARK, "y", MARK, "z", SEP]
        assert flat.mention_positions == [[1], [4]]

    def test_mention_at_sentence_end(self):
        """A mention ending the sentence closes inside that sentence."""
        flat = flatten(simple_doc([["a", "b"], ["c"]], [(0, 1, 2), (1, 0, 1)]))
        assert flat.flat_tokens == [CLS, "a", MARK, "b", MARK, MARK, "c", MARK, SEP]
        assert flat.sentence_spans == [(1, 5), (5, 8)]
        assert flat.mention_positions == [[2], [5]]

    def test_inverse_map_round_trip(self):
        """Every non-special token maps back to its original sentence."""
        doc = simple_doc([["a", "b", "c"], ["d"], ["e", "f"]], [(0, 0, 2), (1, 0, 1), (2, 1, 2), (0, 1, 3)])
        flat = flatten(doc)
        recovered = [[] for _ in doc.sentences]
        for position, token in enumerate(flat.flat_tokens):
            if token not in (CLS, SEP, MARK):
                recovered[flat.sentence_of(position)].append(token)
        assert recovered == doc.sentences
        for s, (start, end) in enumerate(flat.sentence_spans):
            assert all(flat.token_sentence[i] == s for i in range(start, end))

    def test_spans_partition_content(self):
        """Sentence spans cover exactly the tokens between CLS and SEP."""
        flat = flatten(simple_doc([["a"], ["b", "c"]], [(1, 0, 2)]))
        assert flat.sentence_spans[0][0] == 1
        assert flat.sentence_spans[-1][1] == flat.num_tokens - 1
        for (_, end), (start, _) in zip(flat.sentence_spans, flat.sentence_spans[1:]):
            assert end == start

    def test_membership_matrix(self):
        """The membership matrix is one-hot for content tokens and zero for CLS/SEP."""
        membership = flatten(simple_doc([["a"], ["b", "c"]])).sentence_membership()
        np.testing.assert_array_equal(membership, [[0, 0], [1, 0], [0, 1], [0, 1], [0, 0]])


class TestEvidenceVector:
    """Gold evidence distributions."""

    def test_normalized_indicator(self):
        """Indicator [0,1,1,0] becomes [0, 0.5, 0.5, 0]."""
        z = evidence_vector([RelationFact(0, 1, 1, [1, 2])], 4)
        np.testing.assert_array_equal(z, [0.0, 0.5, 0.5, 0.0])

    def test_no_evidence(self):
        """No evidence gives the none-marker."""
        assert evidence_vector([RelationFact(0, 1, 1, [])], 3) is None
        assert evidence_vector([], 3) is None

    def test_union_across_relations(self):
        """Two relations with evidence {0} and {2} give [0.5, 0, 0.5]."""
        facts = [RelationFact(0, 1, 1, [0]), RelationFact(0, 1, 2, [2])]
        np.testing.assert_array_equal(evidence_vector(facts, 3), [0.5, 0.0, 0.5])

    def test_out_of_range(self):
        """Evidence beyond num_sentences is an error."""
        with pytest.raises(ValueError):
            evidence_vector([RelationFact(0, 1, 1, [3])], 3)

    def test_sums_to_one(self):
        """Random evidence vectors sum to 1."""
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(1, 10))
            evidence = [int(i) for i in np.flatnonzero(rng.random(n) < 0.4)]
            z = evidence_vector([RelationFact(0, 1, 1, evidence)], n)
            assert z is None or abs(z.sum() - 1.0) < 1e-12


class TestVocabulary:
    """Token vocabulary."""

    def test_reserved_tokens_first(self):
        """Special tokens occupy the first ids, corpus tokens follow sorted."""
        dataset = Dataset([simple_doc([["b", "a"], ["c", "a"]])], RelationInventory.default(3))
        vocab = build_vocabulary([dataset])
        assert vocab.tokens == SPECIAL_TOKENS + ["a", "b", "c"]

    def test_unknown_maps_to_unk(self):
        """Unseen tokens map to [UNK]."""
        vocab = Vocabulary(SPECIAL_TOKENS + ["a"])
        assert vocab.encode(["a", "zzz"]) == [5, vocab.id_of(UNK)]

    def test_dict_round_trip(self):
        """to_dict/from_dict preserve the vocabulary."""
        vocab = Vocabulary(SPECIAL_TOKENS + ["x", "y"])
        assert Vocabulary.from_dict(vocab.to_dict()) == vocab
