"""
Tests for the planted-relation corpus generator.
"""
import os
import sys
from collections import Counter

import pytest

# Add source directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'source'))

from corpus import emit_docred, load_docred
from synthetic import SynthSpec, generate_synthetic, strip_evidence, trigger_token


def majority_baseline_f1(dataset) -> float:
    """F1 of predicting the most frequent relation for every ordered pair."""
    counts = Counter(f.relation for doc in dataset for f in doc.facts)
    majority = counts.most_common(1)[0][0]
    gold = {(doc.title, f.head, f.tail, f.relation) for doc in dataset for f in doc.facts}
    predicted = {(doc.title, h, t, majority) for doc in dataset for h, t in doc.pairs()}
    correct = len(gold & predicted)
    if correct == 0:
        return 0.0
    precision, recall = correct / len(predicted), correct / len(gold)
    return 2 * precision * recall / (precision + recall)


class TestGenerateSynthetic:
    """Corpus generation."""

    def test_same_seed_identical(self):
        """Seed 7 twice yields identical corpora."""
        assert generate_synthetic(SynthSpec(seed=7, num_docs=5)) == generate_synthetic(SynthSpec(seed=7, num_docs=5))

    def test_different_seed_differs(self):
        """Different seeds give different corpora."""
        assert generate_synthetic(SynthSpec(seed=1, num_docs=5)) != generate_synthetic(SynthSpec(seed=2, num_docs=5))

    def test_single_relation_type(self):
        """With one relation type, every label is that relation and appears as planted."""
        spec = SynthSpec(seed=3, num_docs=1, num_relation_types=1)
        doc = generate_synthetic(spec)[0]
        assert len(doc.facts) == spec.facts_per_doc
        assert {f.relation for f in doc.facts} == {1}

    def test_pattern_only_in_evidence(self):
        """The head-trigger-tail pattern occurs in each fact's evidence sentence and nowhere else."""
        dataset = generate_synthetic(SynthSpec(seed=7, num_docs=20))
        for doc in dataset:
            evidence_sentences = set()
            for fact in doc.facts:
                assert len(fact.evidence) == 1
                sent = doc.sentences[fact.evidence[0]]
                trigger = trigger_token(fact.relation)
                position = sent.index(trigger)
                head_names = set(doc.entities[fact.head].names)
                tail_names = set(doc.entities[fact.tail].names)
                assert sent[position - 1] in head_names
                assert sent[position + 1] in tail_names
                evidence_sentences.add(fact.evidence[0])
            for s_idx, sent in enumerate(doc.sentences):
                if s_idx not in evidence_sentences:
                    assert not any(tok.startswith("rel") for tok in sent)

    def test_documents_validate(self):
        """Generated documents pass corpus validation and survive a file round-trip."""
        dataset = generate_synthetic(SynthSpec(seed=5, num_docs=10))
        for i, doc in enumerate(dataset):
            doc.validate(dataset.num_class, i)
            assert len(doc.sentences) == 4

    def test_file_round_trip(self, tmp_path):
        """Emitted synthetic corpora load back unchanged."""
        dataset = generate_synthetic(SynthSpec(seed=5, num_docs=3))
        emit_docred(dataset, tmp_path / "synth.json")
        assert load_docred(str(tmp_path / "synth.json")) == dataset

    def test_majority_baseline_is_weak(self):
        """On 50 documents the majority-class baseline stays below F1 0.3."""
        dataset = generate_synthetic(SynthSpec(seed=7, num_docs=50))
        assert majority_baseline_f1(dataset) < 0.3

    def test_titles(self):
        """Titles encode seed and index."""
        dataset = generate_synthetic(SynthSpec(seed=9, num_docs=2))
        assert [d.title for d in dataset] == ["synth-9-0", "synth-9-1"]

    def test_without_evidence(self):
        """with_evidence=False produces distant-style labels."""
        dataset = generate_synthetic(SynthSpec(seed=2, num_docs=3, with_evidence=False))
        assert all(f.evidence == [] for doc in dataset for f in doc.facts)

    def test_strip_evidence(self):
        """strip_evidence keeps relations and drops evidence."""
        dataset = generate_synthetic(SynthSpec(seed=2, num_docs=3))
        stripped = strip_evidence(dataset)
        assert [f.relation for d in stripped for f in d.facts] == [f.relation for d in dataset for f in d.facts]
        assert all(f.evidence == [] for d in stripped for f in d.facts)


class TestSynthSpecValidation:
    """Generator settings checks."""

    def test_vocabulary_too_small(self):
        """A vocabulary with no room for fillers is rejected."""
        with pytest.raises(ValueError, match="vocab_size"):
            generate_synthetic(SynthSpec(vocab_size=12, num_relation_types=4, entities_per_doc=4))

    def test_too_many_relation_types(self):
        """Relation types must fit below num_class."""
        with pytest.raises(ValueError):
            generate_synthetic(SynthSpec(num_relation_types=5, num_class=5))

    def test_non_positive_field(self):
        """Counts must be positive."""
        with pytest.raises(ValueError):
            generate_synthetic(SynthSpec(num_docs=0))

    def test_dict_round_trip(self):
        """to_dict/from_dict preserve the spec."""
        spec = SynthSpec(seed=4, num_docs=12, with_evidence=False)
        assert SynthSpec.from_dict(spec.to_dict()) == spec
