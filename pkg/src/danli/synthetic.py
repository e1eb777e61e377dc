"""Small rule-generated corpus in SNLI JSONL format, plus matching vectors.

Used for desk-scale training runs and tests when the real SNLI corpus and
GloVe vectors are not at hand. Labels follow simple lexical rules:

* entailment: the hypothesis keeps the premise's subject and action, possibly
  replacing the subject by a more general word;
* contradiction: the action or the subject is swapped for an incompatible one;
* neutral: the hypothesis adds a detail absent from the premise.
"""

import json

import numpy as np

SUBJECTS = {
    # noun: (incompatible noun, more general noun)
    "man": ("woman", "person"),
    "woman": ("man", "person"),
    "boy": ("girl", "child"),
    "girl": ("boy", "child"),
    "dog": ("cat", "animal"),
    "cat": ("dog", "animal"),
    "chef": ("farmer", "person"),
    "farmer": ("chef", "person"),
}
ACTIONS = {
    "sleeping": "running",
    "running": "sleeping",
    "sitting": "standing",
    "standing": "sitting",
    "eating": "singing",
    "singing": "eating",
    "swimming": "driving",
    "driving": "swimming",
}
ADJECTIVES = ["young", "old", "tall", "small", "quiet", "busy"]
PLACES = ["park", "street", "kitchen", "beach", "field", "garden"]
PREPOSITIONS = ["in", "near", "by"]
EXTRAS = [
    ["for", "a", "contest"],
    ["with", "friends"],
    ["after", "work"],
    ["before", "dinner"],
]
EXTRA_ADJECTIVES = ["happy", "tired", "famous", "proud"]
# Tokens deliberately left out of the vectors file so OOV hashing is exercised.
MISSING_FROM_VECTORS = {".", "proud"}

_TAGS = {"A": "DT", "the": "DT", "a": "DT", "is": "VBZ", ".": "."}
_LABELS = ["entailment", "contradiction", "neutral"]


def _tag(tok):
    if tok in _TAGS:
        return _TAGS[tok]
    if tok.endswith("ing"):
        return "VBG"
    if tok in ADJECTIVES or tok in EXTRA_ADJECTIVES:
        return "JJ"
    if tok in PREPOSITIONS or tok in ("for", "with", "after", "before"):
        return "IN"
    return "NN"


def to_parse(tokens):
    """A flat bracketed parse whose leaves are ``tokens``."""
    leaves = " ".join(f"({_tag(t)} {t})" for t in tokens)
    return f"(ROOT (S {leaves}))"


def _pair(rng, label):
    noun = rng.choice(sorted(SUBJECTS))
    verb = rng.choice(sorted(ACTIONS))
    adj = rng.choice(ADJECTIVES)
    place = rng.choice(PLACES)
    prep = rng.choice(PREPOSITIONS)
    premise = ["A", adj, noun, "is", verb, prep, "the", place, "."]
    other_noun, general = SUBJECTS[noun]
    if label == "entailment":
        subj = general if rng.random() < 0.5 else noun
        hyp = ["A", subj, "is", verb]
        if rng.random() < 0.5:
            hyp += [prep, "the", place]
    elif label == "contradiction":
        if rng.random() < 0.5:
            hyp = ["A", noun, "is", ACTIONS[verb]]
        else:
            hyp = ["A", other_noun, "is", verb]
        if rng.random() < 0.5:
            hyp += [prep, "the", place]
    else:
        if rng.random() < 0.5:
            hyp = ["A", noun, "is", verb] + list(EXTRAS[rng.integers(len(EXTRAS))])
        else:
            hyp = ["A", rng.choice(EXTRA_ADJECTIVES), noun, "is", verb]
    return premise, hyp + ["."]


def generate_records(n, seed=0, unlabeled_every=0):
    """``n`` SNLI-style dicts; every ``unlabeled_every``-th one has gold "--"."""
    rng = np.random.default_rng(seed)
    records = []
    for k in range(n):
        label = _LABELS[k % 3]
        premise, hyp = _pair(rng, label)
        gold = label
        if unlabeled_every and (k + 1) % unlabeled_every == 0:
            gold = "--"
        records.append({
            "annotator_labels": [label],
            "gold_label": gold,
            "pairID": f"synth-{seed}-{k}",
            "sentence1": " ".join(premise),
            "sentence1_parse": to_parse(premise),
            "sentence2": " ".join(hyp),
            "sentence2_parse": to_parse(hyp),
        })
    return records


def vocabulary():
    words = {"A", "a", "the", "is", "."}
    for noun, (other, general) in SUBJECTS.items():
        words.update((noun, other, general))
    words.update(ACTIONS)
    words.update(ADJECTIVES, PLACES, PREPOSITIONS, EXTRA_ADJECTIVES)
    for extra in EXTRAS:
        words.update(extra)
    return sorted(words)


def write_corpus(path, n, seed=0, unlabeled_every=0):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in generate_records(n, seed, unlabeled_every):
            fh.write(json.dumps(rec) + "\n")


def write_vectors(path, dim=300, seed=0):
    """Random Gaussian vectors in GloVe text format for the corpus vocabulary."""
    rng = np.random.default_rng(seed)
    with open(path, "w", encoding="utf-8") as fh:
        for word in vocabulary():
            vec = rng.standard_normal(dim)
            if word in MISSING_FROM_VECTORS:
                continue
            fh.write(word + " " + " ".join(f"{x:.6f}" for x in vec) + "\n")
