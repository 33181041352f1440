"""
GEGA: graph-guided evidence attention for document-level relation extraction.

Forward chain for one document:
    encoder            H (T x d), A (heads x T x T)
    entity_embed       LogSumExp over each entity's mention rows of H
    attention_concentration   per-head adjacency from H
    multi_graphconv    per-head dense-residual graph convolution, heads merged by W_O
    transformer_enc    encoder stack; mean of the last three layers' states and attention
    pair_signals       token importance q and sentence importance p per entity pair
    pair_context       tanh(W [e ; q H~] + b) for subject and object
    relation_scores    grouped bilinear classifier, class 0 doubles as the threshold

Usage:
    model = GegaModel(EncoderConfig(vocab_size=len(vocab)), GegaConfig(num_class=97), vocab, seed=0)
    features = prepare_document(doc, vocab, num_class=97)
    out = model.forward(features)
    decide_relations(out.scores.values[0], cap=4)
"""
import math
from dataclasses import dataclass, asdict, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np

from corpus import Document, FlatIndex, Vocabulary, evidence_vector, flatten
from encoder import EncoderConfig, EncoderLayer, EncoderOutput, ToyEncoder, encode_windowed
from numerics import (
    DiffTensor, ParameterSet, ShapeError, concat, logsumexp, masked_fill, matmul, reshape,
    softmax, stack, take, tanh, tensor_mean, tensor_sum, relu,
)

# Products of attention rows at or below this mass fall back to uniform q.
DEGENERATE_MASS = 1e-300


@dataclass
class GegaConfig:
    num_heads: int = 2
    gnn_layers: int = 2
    enc_layers: int = 3
    num_class: int = 97
    num_labels_cap: int = 4
    evi_thresh: float = 0.2
    bilinear_groups: int = 0  # 0 = max(1, d_model // 64)
    use_attention_concentration: bool = True
    use_graphconv: bool = True
    use_transformer_enc: bool = True

    def groups_for(self, d_model: int) -> int:
        return self.bilinear_groups or max(1, d_model // 64)

    def validate(self, d_model: int) -> None:
        if self.num_heads < 1 or d_model % self.num_heads:
            raise ValueError(f"d_model ({d_model}) must be divisible by num_heads ({self.num_heads})")
        if self.gnn_layers < 1:
            raise ValueError(f"gnn_layers must be at least 1, got {self.gnn_layers}")
        if self.enc_layers < 3:
            raise ValueError(f"enc_layers must be at least 3 for last-3 averaging, got {self.enc_layers}")
        if self.num_class < 2:
            raise ValueError(f"num_class must be at least 2, got {self.num_class}")
        if self.num_labels_cap < 1:
            raise ValueError(f"num_labels_cap must be at least 1, got {self.num_labels_cap}")
        groups = self.groups_for(d_model)
        if d_model % groups:
            raise ValueError(f"d_model ({d_model}) must be divisible by bilinear_groups ({groups})")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'GegaConfig':
        return cls(**{f.name: data[f.name] for f in fields(cls) if f.name in data})


@dataclass
class PairSignals:
    """
    q: (pairs, tokens) token importance; p: (pairs, sentences) sentence importance;
    degenerate: pairs whose attention product vanished and fell back to uniform q;
    z: (pairs, sentences) gold evidence distributions, rows of zeros where z_mask is False.
    """
    q: DiffTensor
    p: DiffTensor
    degenerate: np.ndarray
    z: Optional[np.ndarray] = None
    z_mask: Optional[np.ndarray] = None


@dataclass
class DocumentFeatures:
    """Model-ready view of one document."""
    title: str
    ids: List[int]
    flat: FlatIndex
    pairs: List[Tuple[int, int]]
    labels: np.ndarray          # (pairs, num_class) bool, column 0 set when no relation holds
    evidence: np.ndarray        # (pairs, sentences) gold z rows
    evidence_mask: np.ndarray   # (pairs,) bool, True where z exists

    @property
    def num_pairs(self) -> int:
        return len(self.pairs)

    @property
    def supervised(self) -> np.ndarray:
        """Pairs with at least one gold relation."""
        return ~self.labels[:, 0]


@dataclass
class ForwardOutput:
    scores: DiffTensor          # (pairs, num_class)
    signals: PairSignals
    entity_embeddings: DiffTensor


def prepare_document(doc: Document, vocabulary: Vocabulary, num_class: int,
                     pairs: Optional[Sequence[Tuple[int, int]]] = None) -> DocumentFeatures:
    """Flatten a document and build label and evidence targets for its entity pairs."""
    flat = flatten(doc)
    pairs = list(pairs) if pairs is not None else doc.pairs()
    grouped = doc.facts_by_pair()
    labels = np.zeros((len(pairs), num_class), dtype=bool)
    evidence = np.zeros((len(pairs), doc.num_sentences))
    evidence_mask = np.zeros(len(pairs), dtype=bool)
    for row, pair in enumerate(pairs):
        facts = grouped.get(pair, [])
        for fact in facts:
            labels[row, fact.relation] = True
        if not facts:
            labels[row, 0] = True
        z = evidence_vector(facts, doc.num_sentences)
        if z is not None:
            evidence[row] = z
            evidence_mask[row] = True
    return DocumentFeatures(title=doc.title, ids=vocabulary.encode(flat.flat_tokens), flat=flat,
                            pairs=pairs, labels=labels, evidence=evidence, evidence_mask=evidence_mask)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def entity_embed(mention_embeddings: DiffTensor) -> DiffTensor:
    """Coordinate-wise LogSumExp over an entity's (mentions, d) embeddings."""
    if mention_embeddings.ndim != 2 or mention_embeddings.shape[0] == 0:
        raise ValueError(f"entity_embed needs a non-empty (mentions, d) matrix, got {mention_embeddings.shape}")
    return logsumexp(mention_embeddings, axis=0)


def attention_concentration(h: DiffTensor, wq: Sequence[DiffTensor], wk: Sequence[DiffTensor]) -> List[DiffTensor]:
    """Per head i: softmax((H Wq_i)(H Wk_i)^T / sqrt(d)), each (T, T)."""
    if len(wq) != len(wk):
        raise ShapeError("attention_concentration", f"{len(wq)} key projections", len(wk))
    d = h.shape[-1]
    scale = 1.0 / math.sqrt(d)
    heads = []
    for w_query, w_key in zip(wq, wk):
        query = matmul(h, w_query)
        key = matmul(h, w_key)
        heads.append(softmax(matmul(query, key.T) * scale, axis=-1))
    return heads


def multi_graphconv(x: DiffTensor, adjacency: Sequence[DiffTensor],
                    layer_weights: Sequence[Sequence[DiffTensor]], wo: DiffTensor) -> DiffTensor:
    """
    Per head i with input slice x_i:
        h_i^0 = x_i
        h_i^l = ReLU(A_i x W_i^l) + h_i^(l-1)
    Heads are concatenated and projected by wo.
    """
    tokens, d = x.shape
    num_heads = len(adjacency)
    if num_heads == 0 or d % num_heads or len(layer_weights) != num_heads:
        raise ShapeError("multi_graphconv", f"{num_heads} heads dividing d={d}", len(layer_weights))
    head_dim = d // num_heads
    outputs = []
    for i, (adj, weights) in enumerate(zip(adjacency, layer_weights)):
        if not weights:
            raise ValueError("multi_graphconv needs at least one layer per head")
        hidden = take(x, np.arange(i * head_dim, (i + 1) * head_dim), axis=1)
        propagated = matmul(adj, x)
        for w in weights:
            hidden = relu(matmul(propagated, w)) + hidden
        outputs.append(hidden)
    return matmul(concat(outputs, axis=1), wo)


def transformer_enc(x: DiffTensor, layers: Sequence[EncoderLayer]) -> Tuple[DiffTensor, DiffTensor]:
    """
    Run the encoder stack; return the mean of the last three hidden states and
    the mean of the last three head-averaged attention maps (rows renormalized).
    """
    if len(layers) < 3:
        raise ValueError(f"transformer_enc needs at least 3 layers, got {len(layers)}")
    hidden_states = []
    attentions = []
    for layer in layers:
        x, attention = layer(x)
        hidden_states.append(x)
        attentions.append(tensor_mean(attention, axis=0))
    h_out = tensor_mean(stack(hidden_states[-3:]), axis=0)
    a_mean = tensor_mean(stack(attentions[-3:]), axis=0)
    a_out = a_mean / tensor_sum(a_mean, axis=-1, keepdims=True)
    return h_out, a_out


def pair_signals(a_out: DiffTensor, flat: FlatIndex, pairs: Sequence[Tuple[int, int]]) -> PairSignals:
    """
    q = normalized product of the two entities' attention rows over sentence
    tokens; p_j = sum of q over sentence j.

    An entity's attention row is the mean of a_out rows at its mention markers.
    """
    if not pairs:
        raise ValueError("pair_signals needs at least one entity pair")
    tokens = a_out.shape[-1]
    if a_out.shape != (tokens, tokens) or tokens != flat.num_tokens:
        raise ShapeError("pair_signals", (flat.num_tokens, flat.num_tokens), a_out.shape)
    used = sorted({e for pair in pairs for e in pair})
    rows = {}
    for e in used:
        positions = flat.mention_positions[e]
        if not positions or min(positions) < 0:
            raise ValueError(f"Entity {e} has no mention in the flat index")
        rows[e] = tensor_mean(take(a_out, positions, axis=0), axis=0)
    entity_rows = stack([rows[e] for e in used])
    slot = {e: i for i, e in enumerate(used)}
    heads = take(entity_rows, [slot[h] for h, _ in pairs])
    tails = take(entity_rows, [slot[t] for _, t in pairs])

    content = flat.content_mask()
    product = masked_fill(heads * tails, ~content[None, :], 0.0)
    mass = tensor_sum(product, axis=-1, keepdims=True)
    degenerate = mass.values[:, 0] <= DEGENERATE_MASS
    safe_mass = masked_fill(mass, degenerate[:, None], 1.0)
    uniform = np.where(degenerate[:, None] & content[None, :], 1.0 / content.sum(), 0.0)
    q = masked_fill(product / safe_mass, degenerate[:, None], 0.0) + DiffTensor(uniform)
    p = matmul(q, DiffTensor(flat.sentence_membership()))
    return PairSignals(q=q, p=p, degenerate=degenerate)


def pair_context(e_subject: DiffTensor, e_object: DiffTensor, h: DiffTensor, q: DiffTensor,
                 w_subject: DiffTensor, b_subject: DiffTensor,
                 w_object: DiffTensor, b_object: DiffTensor) -> Tuple[DiffTensor, DiffTensor]:
    """c = tanh(W [e ; q H] + b) for subject and object; inputs are (pairs, .) rows."""
    local = matmul(q, h)
    c_subject = tanh(matmul(concat([e_subject, local], axis=-1), w_subject) + b_subject)
    c_object = tanh(matmul(concat([e_object, local], axis=-1), w_object) + b_object)
    return c_subject, c_object


def relation_scores(c_subject: DiffTensor, c_object: DiffTensor, w: DiffTensor, b: DiffTensor,
                    groups: int) -> DiffTensor:
    """
    Grouped bilinear scores: the d-dim contexts are split into `groups` blocks
    and score_r = sum_g c_s,g^T W_r,g c_o,g + b_r.

    w has shape (groups * block * block, num_class).
    """
    pairs, d = c_subject.shape
    if d % groups:
        raise ValueError(f"Context size {d} not divisible by {groups} bilinear groups")
    block = d // groups
    if w.shape[0] != groups * block * block:
        raise ShapeError("relation_scores", (groups * block * block, "num_class"), w.shape)
    outer = reshape(c_subject, (pairs, groups, block, 1)) * reshape(c_object, (pairs, groups, 1, block))
    return matmul(reshape(outer, (pairs, groups * block * block)), w) + b


def relation_probabilities(scores: np.ndarray) -> np.ndarray:
    """P(r | pair) = sigmoid(score_r)."""
    return np.exp(-np.logaddexp(0.0, -np.asarray(scores, dtype=float)))


def decide_relations(scores: np.ndarray, cap: Optional[int] = None) -> List[int]:
    """Relations scoring above the threshold class 0, best first, at most `cap`."""
    scores = np.asarray(scores, dtype=float)
    above = [r for r in range(1, len(scores)) if scores[r] > scores[0]]
    above.sort(key=lambda r: (-scores[r], r))
    return above if cap is None else above[:cap]


def select_evidence(p: np.ndarray, evi_thresh: float) -> List[int]:
    """Sentence ids whose importance is strictly above evi_thresh."""
    return [int(j) for j in np.flatnonzero(np.asarray(p) > evi_thresh)]


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class GegaModel:
    """
    Encoder plus GEGA layers over one ParameterSet.

    Encoder parameters are named "encoder.*"; everything added on top is
    "gega.*", which is how optimizers tell the two learning-rate groups apart.
    """

    def __init__(self, encoder_config: EncoderConfig, config: GegaConfig,
                 vocabulary: Optional[Vocabulary] = None, seed: int = 0):
        encoder_config.validate()
        config.validate(encoder_config.d_model)
        self.encoder_config = encoder_config
        self.config = config
        self.vocabulary = vocabulary
        self.seed = seed
        self.params = ParameterSet(seed)
        self.encoder = ToyEncoder(encoder_config, self.params, vocabulary)

        d = encoder_config.d_model
        heads = config.num_heads
        head_dim = d // heads
        p = self.params
        self.concentration_wq = [p.create(f"gega.concentration.head{i}.wq", (d, head_dim), fan_in=d)
                                 for i in range(heads)]
        self.concentration_wk = [p.create(f"gega.concentration.head{i}.wk", (d, head_dim), fan_in=d)
                                 for i in range(heads)]
        self.graphconv_w = [[p.create(f"gega.graphconv.head{i}.layer{l}", (d, head_dim), fan_in=d)
                             for l in range(config.gnn_layers)] for i in range(heads)]
        self.graphconv_wo = p.create("gega.graphconv.wo", (d, d), fan_in=d)
        self.transformer_layers = [
            EncoderLayer(p, f"gega.transformer.layer{i}", d, heads, encoder_config.ffn_dim)
            for i in range(config.enc_layers)
        ]
        self.context_ws = p.create("gega.context.subject.w", (2 * d, d), fan_in=2 * d)
        self.context_bs = p.create("gega.context.subject.b", (d,), init="zeros")
        self.context_wo = p.create("gega.context.object.w", (2 * d, d), fan_in=2 * d)
        self.context_bo = p.create("gega.context.object.b", (d,), init="zeros")
        groups = config.groups_for(d)
        block = d // groups
        self.groups = groups
        self.classifier_w = p.create("gega.classifier.w", (groups * block * block, config.num_class),
                                     fan_in=groups * block * block)
        self.classifier_b = p.create("gega.classifier.b", (config.num_class,), init="zeros")

    def _adjacency(self, encoded: EncoderOutput) -> List[DiffTensor]:
        tokens = encoded.num_tokens
        heads = self.config.num_heads
        if self.config.use_attention_concentration:
            return attention_concentration(encoded.H, self.concentration_wq, self.concentration_wk)
        enc_heads = encoded.A.shape[0]
        if enc_heads == heads:
            return [reshape(take(encoded.A, [i], axis=0), (tokens, tokens)) for i in range(heads)]
        averaged = tensor_mean(encoded.A, axis=0)
        return [averaged] * heads

    def forward(self, features: DocumentFeatures) -> ForwardOutput:
        if not features.pairs:
            raise ValueError(f"Document {features.title!r} has no entity pairs to score")
        encoded = encode_windowed(self.encoder, features.ids)
        if encoded.num_tokens != features.flat.num_tokens:
            raise ShapeError("forward", features.flat.num_tokens, encoded.num_tokens)

        entities = sorted({e for pair in features.pairs for e in pair})
        embeddings = stack([entity_embed(take(encoded.H, features.flat.mention_positions[e], axis=0))
                            for e in entities])
        slot = {e: i for i, e in enumerate(entities)}

        adjacency = self._adjacency(encoded)
        hidden = multi_graphconv(encoded.H, adjacency, self.graphconv_w, self.graphconv_wo) \
            if self.config.use_graphconv else encoded.H
        if self.config.use_transformer_enc:
            hidden, a_out = transformer_enc(hidden, self.transformer_layers)
        else:
            a_mean = tensor_mean(stack(adjacency), axis=0)
            a_out = a_mean / tensor_sum(a_mean, axis=-1, keepdims=True)

        signals = pair_signals(a_out, features.flat, features.pairs)
        signals.z = features.evidence
        signals.z_mask = features.evidence_mask
        e_subject = take(embeddings, [slot[h] for h, _ in features.pairs])
        e_object = take(embeddings, [slot[t] for _, t in features.pairs])
        c_subject, c_object = pair_context(e_subject, e_object, hidden, signals.q,
                                           self.context_ws, self.context_bs, self.context_wo, self.context_bo)
        scores = relation_scores(c_subject, c_object, self.classifier_w, self.classifier_b, self.groups)
        return ForwardOutput(scores=scores, signals=signals, entity_embeddings=embeddings)

    def encoder_parameter_names(self) -> List[str]:
        return [name for name in self.params.names() if name.startswith("encoder.")]

    def added_parameter_names(self) -> List[str]:
        return [name for name in self.params.names() if not name.startswith("encoder.")]
