"""
Tests for RE-F1, Ign-F1, Evi-F1 and the official result file.
"""
import json
import os
import sys

import numpy as np
import pytest

# Add source directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'source'))

from corpus import Dataset, Document, Entity, Mention, RelationFact, RelationInventory
from metrics import (
    PredictionRecord, emit_official, evaluate, evi_f1, ign_f1, official_records, parse_official, re_f1,
)


INVENTORY = RelationInventory.default(4)


def named_doc(title: str, names, facts) -> Document:
    """One sentence per entity, each entity mentioned once under its name."""
    sentences = [[name, "is", "here"] for name in names]
    entities = [Entity([Mention(i, 0, 1, name)]) for i, name in enumerate(names)]
    return Document(title=title, sentences=sentences, entities=entities, facts=list(facts))


def f1_oracle(predicted: set, gold: set) -> float:
    correct = len([t for t in predicted if t in gold])
    if correct == 0:
        return 0.0
    precision = correct / len(predicted)
    recall = correct / len(gold)
    return 2 * precision * recall / (precision + recall)


def random_instance(rng):
    """Random gold dataset with up to 4 documents and a noisy prediction set."""
    documents, predictions = [], []
    for d in range(int(rng.integers(1, 5))):
        n = int(rng.integers(2, 5))
        facts = []
        for h in range(n):
            for t in range(n):
                if h != t and rng.random() < 0.3:
                    evidence = [int(s) for s in range(n) if rng.random() < 0.4]
                    facts.append(RelationFact(h, t, int(rng.integers(1, 4)), evidence))
        doc = named_doc(f"d{d}", [f"e{d}_{i}" for i in range(n)], facts)
        documents.append(doc)
        for fact in facts:
            if rng.random() < 0.7:
                evidence = [s for s in range(n) if rng.random() < 0.5]
                predictions.append(PredictionRecord(doc.title, fact.head, fact.tail, fact.relation, evidence))
        for _ in range(int(rng.integers(0, 3))):
            h, t = rng.choice(n, size=2, replace=False)
            predictions.append(PredictionRecord(doc.title, int(h), int(t), int(rng.integers(1, 4)), [0]))
    return Dataset(documents, INVENTORY), predictions


class TestReF1:
    """Relation F1."""

    def test_matches_oracle(self):
        """re_f1 equals the set-based formula on 100 random instances."""
        rng = np.random.default_rng(0)
        for _ in range(100):
            gold, predictions = random_instance(rng)
            gold_set = {(d.title, f.head, f.tail, f.relation) for d in gold for f in d.facts}
            predicted = {p.triple for p in predictions}
            assert re_f1(predictions, gold).f1 == pytest.approx(f1_oracle(predicted, gold_set), abs=1e-12)

    def test_perfect(self):
        """Predicting exactly the gold facts gives F1 = 1."""
        gold = Dataset([named_doc("a", ["x", "y"], [RelationFact(0, 1, 2, [0])])], INVENTORY)
        scores = re_f1([PredictionRecord("a", 0, 1, 2, [0])], gold)
        assert (scores.precision, scores.recall, scores.f1) == (1.0, 1.0, 1.0)

    def test_duplicates_counted_once(self):
        """Repeated predictions of one triple count once and are reported."""
        gold = Dataset([named_doc("a", ["x", "y"], [RelationFact(0, 1, 2)])], INVENTORY)
        prediction = PredictionRecord("a", 0, 1, 2)
        scores = re_f1([prediction, prediction], gold)
        assert scores.f1 == 1.0
        assert scores.duplicates == 1

    def test_empty_predictions(self):
        """No predictions yields 0 and flags the score as undefined."""
        gold = Dataset([named_doc("a", ["x", "y"], [RelationFact(0, 1, 2)])], INVENTORY)
        scores = re_f1([], gold)
        assert scores.f1 == 0.0
        assert scores.undefined

    def test_rejects_na_prediction(self):
        """A prediction of the NA class is invalid."""
        with pytest.raises(ValueError, match="NA"):
            PredictionRecord("a", 0, 1, 0)


class TestIgnF1:
    """F1 ignoring facts already seen in training."""

    def test_matches_oracle(self):
        """ign_f1 equals an independent filter-then-score computation on 100 random instances."""
        rng = np.random.default_rng(1)
        for _ in range(100):
            gold, predictions = random_instance(rng)
            train, _ = random_instance(rng)
            train_keys = {(train_doc.entities[f.head].mentions[0].name, train_doc.entities[f.tail].mentions[0].name,
                           f.relation) for train_doc in train for f in train_doc.facts}
            documents = {d.title: d for d in gold}

            def seen(triple):
                title, h, t, r = triple
                doc = documents[title]
                return (doc.entities[h].mentions[0].name, doc.entities[t].mentions[0].name, r) in train_keys

            gold_set = {(d.title, f.head, f.tail, f.relation) for d in gold for f in d.facts}
            predicted = {p.triple for p in predictions}
            expected = f1_oracle({t for t in predicted if not seen(t)}, {t for t in gold_set if not seen(t)})
            assert ign_f1(predictions, gold, train).f1 == pytest.approx(expected, abs=1e-12)

    def test_seen_fact_ignored(self):
        """A correct prediction of a fact whose names appear in training does not count."""
        train = Dataset([named_doc("t", ["Paris", "France"], [RelationFact(0, 1, 1)])], INVENTORY)
        gold = Dataset([named_doc("g", ["Paris", "France", "Rome"],
                                  [RelationFact(0, 1, 1), RelationFact(2, 1, 2)])], INVENTORY)
        predictions = [PredictionRecord("g", 0, 1, 1), PredictionRecord("g", 2, 1, 1)]
        assert re_f1(predictions, gold).f1 == pytest.approx(0.5)
        scores = ign_f1(predictions, gold, train)
        assert scores.num_gold == 1
        assert scores.num_predicted == 1
        assert scores.f1 == 0.0

    def test_without_train_equals_re(self):
        """With no training set Ign-F1 is RE-F1."""
        gold, predictions = random_instance(np.random.default_rng(2))
        assert ign_f1(predictions, gold, None).f1 == re_f1(predictions, gold).f1


class TestEviF1:
    """Evidence F1."""

    def test_matches_oracle(self):
        """evi_f1 equals micro F1 over (title, h, t, r, sentence) on 100 random instances."""
        rng = np.random.default_rng(3)
        for _ in range(100):
            gold, predictions = random_instance(rng)
            gold_set = {(d.title, f.head, f.tail, f.relation, s) for d in gold for f in d.facts for s in f.evidence}
            predicted = {p.triple + (s,) for p in predictions for s in p.evidence}
            assert evi_f1(predictions, gold).f1 == pytest.approx(f1_oracle(predicted, gold_set), abs=1e-12)

    def test_wrong_relation_evidence_does_not_match(self):
        """Evidence attached to a wrong relation never counts as correct."""
        gold = Dataset([named_doc("a", ["x", "y"], [RelationFact(0, 1, 2, [0, 1])])], INVENTORY)
        scores = evi_f1([PredictionRecord("a", 0, 1, 3, [0, 1])], gold)
        assert scores.num_correct == 0
        assert scores.num_predicted == 2

    def test_partial_evidence(self):
        """One of two gold sentences found: P = 1, R = 0.5."""
        gold = Dataset([named_doc("a", ["x", "y"], [RelationFact(0, 1, 2, [0, 1])])], INVENTORY)
        scores = evi_f1([PredictionRecord("a", 0, 1, 2, [1])], gold)
        assert scores.precision == 1.0
        assert scores.recall == 0.5
        assert scores.f1 == pytest.approx(2 / 3)


class TestReport:
    """Report formatting."""

    def test_format_block(self):
        """The block names every metric with four decimals."""
        gold = Dataset([named_doc("a", ["x", "y"], [RelationFact(0, 1, 2, [0])])], INVENTORY)
        block = evaluate([PredictionRecord("a", 0, 1, 2, [0])], gold).format_block()
        lines = block.splitlines()
        assert lines[0].startswith("F1      1.0000")
        assert lines[1].startswith("Ign-F1  1.0000")
        assert lines[2].startswith("Evi-F1  1.0000")

    def test_mlflow_metrics(self):
        """Metric names carry the prefix."""
        gold = Dataset([named_doc("a", ["x", "y"], [RelationFact(0, 1, 2, [0])])], INVENTORY)
        metrics = evaluate([PredictionRecord("a", 0, 1, 2, [0])], gold).to_mlflow_metrics("dev_")
        assert metrics["dev_re_f1"] == 1.0
        assert set(metrics) >= {"dev_ign_f1", "dev_evi_f1", "dev_re_precision"}


class TestOfficialFile:
    """DocRED-style result file."""

    def test_sorted_and_named(self):
        """Records are sorted by (title, h, t, r) and carry relation names."""
        predictions = [PredictionRecord("b", 0, 1, 1), PredictionRecord("a", 1, 0, 3, [2, 0]),
                       PredictionRecord("a", 1, 0, 2)]
        records = official_records(predictions, INVENTORY)
        assert [(r["title"], r["r"]) for r in records] == [("a", "R2"), ("a", "R3"), ("b", "R1")]
        assert records[1]["evidence"] == [0, 2]

    def test_emit_then_parse(self, tmp_path):
        """Parsing an emitted file gives back the same predictions."""
        predictions = [PredictionRecord("a", 0, 1, 2, [1], score=0.75), PredictionRecord("b", 2, 0, 1)]
        path = tmp_path / "result.json"
        emit_official(predictions, INVENTORY, path)
        assert parse_official(path, INVENTORY) == sorted(predictions, key=PredictionRecord.sort_key)

    def test_parse_accepts_integer_relations(self, tmp_path):
        """Relations may be written as ids instead of names."""
        path = tmp_path / "ids.json"
        path.write_text(json.dumps([{"title": "a", "h_idx": 0, "t_idx": 1, "r": 2, "evidence": []}]))
        assert parse_official(path, INVENTORY)[0].r == 2

    def test_parse_malformed(self, tmp_path):
        """A record without h_idx is reported with its position."""
        path = tmp_path / "bad.json"
        path.write_text(json.dumps([{"title": "a", "t_idx": 1, "r": "R1"}]))
        with pytest.raises(ValueError, match="Malformed prediction 0"):
            parse_official(path, INVENTORY)

    def test_parse_not_a_list(self, tmp_path):
        """The file must hold a JSON array."""
        path = tmp_path / "obj.json"
        path.write_text("{}")
        with pytest.raises(ValueError, match="JSON array"):
            parse_official(path, INVENTORY)
