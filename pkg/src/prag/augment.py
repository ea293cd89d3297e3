"""Document augmentation and the synthetic fact benchmark.

Rule-based augmentation works on documents produced by the synthetic
generator: every sentence renders one (subject, relation, object) fact from
a fixed template bank, so rewrites re-render the same facts with different
templates and QA generation asks for the subject given the object. Held-out
evaluation questions come from a separate template bank so answering them
requires the fact, not the training phrasing.

For real corpora there is a pluggable chat-completion augmenter
(``augment_llm``) plus a sentence-permutation fallback for plain text.
"""

import json
import os
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field

import numpy as np

from .errors import EndpointUnreachable, InsufficientFacts, MalformedResponse
from .retriever import Corpus, Document, content_hash
from .text import render_passage, render_question

# ---------------------------------------------------------------------------
# synthetic lexicon

_ONSETS = [
    "bal", "bren", "cor", "dav", "drel", "fal", "gor", "hul", "jor", "kel",
    "lor", "mar", "nev", "pel", "quar", "ros", "sel", "tor", "ulm", "vel",
    "wyr", "yar", "zan", "thal", "bram", "crev", "dorn", "fenn", "grel", "hald",
    "isk", "jun", "kov", "lun", "morv", "nyr", "pol", "sarn", "tev", "vos",
]
_LINKS = ["a", "e", "i", "o", "u", "ar", "en", "or", "ath", "il"]
_CODAS = [
    "bec", "dor", "dun", "far", "gard", "gath", "hem", "kin", "lam", "mere",
    "mir", "mond", "nuth", "rath", "rek", "rin", "rud", "sca", "stel", "tarn",
    "thum", "vale", "van", "vik", "wald", "wick", "wyn", "yer", "zor", "holt",
    "dral", "fen", "lis", "mur",
]

# Guard against syllable products that land on real words or famous names.
_BLOCKLIST = {
    "balder", "boston", "cordova", "gordon", "hamburg", "london", "marathon",
    "mardi", "martin", "morgan", "norwich", "oslo", "paris", "selma", "toronto",
    "vienna", "warwick", "york", "yorks", "zanzibar",
}


def _entity_pool() -> list:
    """Short two-syllable names first; three-syllable overflow for big corpora."""
    pool = [onset + coda for onset in _ONSETS for coda in _CODAS]
    pool += [onset + link + coda for onset in _ONSETS for link in _LINKS for coda in _CODAS]
    return pool


class _EntityDraw:
    """Deterministic without-replacement entity supply for one generator call.

    Short names are drawn before the three-syllable overflow tier.
    """

    def __init__(self, rng, exclude=()):
        self._pool = _entity_pool()
        short = len(_ONSETS) * len(_CODAS)
        self._order = np.concatenate([rng.permutation(short),
                                      short + rng.permutation(len(self._pool) - short)])
        self._cursor = 0
        self._excluded = {e.lower() for e in exclude} | _BLOCKLIST

    def take(self) -> str:
        while self._cursor < len(self._order):
            candidate = self._pool[self._order[self._cursor]]
            self._cursor += 1
            if candidate in self._excluded:
                continue
            self._excluded.add(candidate)
            return candidate.capitalize()
        raise RuntimeError("entity pool exhausted")


# ---------------------------------------------------------------------------
# relations and templates


@dataclass(frozen=True)
class Relation:
    name: str
    statements: tuple       # >= 4 sentence templates with {s} and {o}
    train_questions: tuple  # templates with {o}; answer is the subject
    eval_questions: tuple   # held-out templates, disjoint surfaces from train


# Statement banks are ordered so templates 0..2 place the object before the
# subject; sentences rendered from them make every subject byte predictable
# from (relation, object) context, which is the lookup the questions need.
# Template 3 is a subject-first variant kept for rewrite diversity.
N_PRIMARY_STATEMENTS = 3

RELATIONS = {
    "capital_of": Relation(
        "capital_of",
        statements=(
            "The capital of {o} is {s}.",
            "The realm of {o} is governed from {s}.",
            "The seat of {o} is the city of {s}.",
            "{s} serves as the capital of {o}.",
        ),
        train_questions=(
            "What is the capital of {o}?",
            "Which city is the capital of {o}?",
        ),
        eval_questions=(
            "Name the capital of {o}.",
            "The capital of {o} is known as what?",
        ),
    ),
    "chief_river": Relation(
        "chief_river",
        statements=(
            "The chief river of {o} is {s}.",
            "Through {o} flows the river {s}.",
            "The lands of {o} are watered by the river {s}.",
            "{s} is the chief river of {o}.",
        ),
        train_questions=(
            "What is the chief river of {o}?",
            "Which river flows through {o}?",
        ),
        eval_questions=(
            "Name the chief river of {o}.",
            "The chief river of {o} is called what?",
        ),
    ),
    "founded_by": Relation(
        "founded_by",
        statements=(
            "{o} was founded by {s}.",
            "The founder of {o} was {s}.",
            "The city of {o} owes its founding to {s}.",
            "{s} founded {o}.",
        ),
        train_questions=(
            "Who founded {o}?",
            "Who was the founder of {o}?",
        ),
        eval_questions=(
            "Name the founder of {o}.",
            "{o} was established by whom?",
        ),
    ),
    "guarded_by": Relation(
        "guarded_by",
        statements=(
            "{o} is guarded by the fortress of {s}.",
            "The defense of {o} rests on the fortress of {s}.",
            "The walls of {o} are held by the fortress of {s}.",
            "The fortress of {s} guards {o}.",
        ),
        train_questions=(
            "Which fortress guards {o}?",
            "What is the guardian fortress of {o}?",
        ),
        eval_questions=(
            "Name the fortress that guards {o}.",
            "The fortress guarding {o} is called what?",
        ),
    ),
    "prized_export": Relation(
        "prized_export",
        statements=(
            "The prized export of {o} is {s}.",
            "The markets of {o} deal chiefly in {s}.",
            "Merchants of {o} trade mainly in {s}.",
            "{s} is the prized export of {o}.",
        ),
        train_questions=(
            "What is the prized export of {o}?",
            "What do the merchants of {o} trade in?",
        ),
        eval_questions=(
            "Name the prized export of {o}.",
            "The markets of {o} deal chiefly in what?",
        ),
    ),
    "patron_of": Relation(
        "patron_of",
        statements=(
            "The patron of {o} is {s}.",
            "The people of {o} revere {s} as patron.",
            "{o} honors {s} as its patron.",
            "{s} is the patron of {o}.",
        ),
        train_questions=(
            "Who is the patron of {o}?",
            "Whom do the people of {o} revere as patron?",
        ),
        eval_questions=(
            "Name the patron of {o}.",
            "The patron of {o} is known as whom?",
        ),
    ),
}

RELATION_ORDER = tuple(RELATIONS)


@dataclass(frozen=True)
class FactTriple:
    subject: str
    relation: str
    object: str

    def __post_init__(self):
        if not (self.subject and self.relation and self.object):
            raise ValueError("triple fields must be non-empty")
        if self.relation not in RELATIONS:
            raise ValueError(f"unknown relation {self.relation!r}")


def render_statement(triple: FactTriple, template_idx: int) -> str:
    bank = RELATIONS[triple.relation].statements
    return bank[template_idx % len(bank)].format(s=triple.subject, o=triple.object)


_ENTITY_RE = r"([A-Z][a-zA-Z]+)"


def _compile_statement(template: str):
    pattern = "^"
    slots = []
    for piece in re.split(r"(\{[so]\})", template):
        if piece == "{s}" or piece == "{o}":
            slots.append(piece[1])
            pattern += _ENTITY_RE
        else:
            pattern += re.escape(piece)
    return re.compile(pattern + "$"), slots


_STATEMENT_PATTERNS = [
    (relation.name, idx, *_compile_statement(template))
    for relation in RELATIONS.values()
    for idx, template in enumerate(relation.statements)
]


def split_sentences(text: str) -> list:
    return [s for s in re.split(r"(?<=[.?!])\s+", text.strip()) if s]


def parse_sentence(sentence: str):
    """(FactTriple, template index) for a template-rendered sentence, else None."""
    for rel_name, idx, pattern, slots in _STATEMENT_PATTERNS:
        m = pattern.match(sentence)
        if m:
            values = dict(zip(slots, m.groups()))
            return FactTriple(values["s"], rel_name, values["o"]), idx
    return None


def extract_triples(text: str) -> list:
    """Facts stated by template sentences in the text; unparseable sentences are skipped."""
    triples = []
    for sentence in split_sentences(text):
        parsed = parse_sentence(sentence)
        if parsed:
            triples.append(parsed[0])
    return triples


# ---------------------------------------------------------------------------
# augmented dataset


@dataclass(frozen=True)
class AugmentedDataset:
    """Rewrites (original first) crossed with QA pairs for one document."""

    doc_id: int
    rewrites: tuple  # rewrites[0] is the original text
    qa_pairs: tuple  # (question, answer)

    def __post_init__(self):
        if not self.rewrites or any(not r.strip() for r in self.rewrites):
            raise ValueError("every rewrite must be non-empty")
        if not self.qa_pairs or any(not a.strip() for _, a in self.qa_pairs):
            raise ValueError("every answer must be non-empty")

    def triples(self) -> list:
        """The (rewrite, question, answer) cross product, rewrite-major."""
        return [(d, q, a) for d in self.rewrites for q, a in self.qa_pairs]

    def to_dict(self) -> dict:
        return {"doc_id": f"{self.doc_id:016x}",
                "rewrites": list(self.rewrites),
                "qa_pairs": [list(pair) for pair in self.qa_pairs]}

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentedDataset":
        return cls(doc_id=int(data["doc_id"], 16),
                   rewrites=tuple(data["rewrites"]),
                   qa_pairs=tuple((q, a) for q, a in data["qa_pairs"]))


def rewrite_rule_based(doc: Document, n: int, seed: int) -> list:
    """n fact-preserving paraphrases; sentence-permutation fallback for plain text."""
    if n <= 0:
        return []
    rng = np.random.default_rng([seed, doc.doc_id % (2 ** 63)])
    sentences = split_sentences(doc.text)
    parsed = [parse_sentence(s) for s in sentences]
    rewrites = []
    if all(p is not None for p in parsed) and parsed:
        for _ in range(n):
            rendered = []
            for triple, current_idx in parsed:
                # stay within the object-first trio so rewrites keep training
                # the (relation, object) -> subject direction
                if current_idx < N_PRIMARY_STATEMENTS:
                    shift = int(rng.integers(1, N_PRIMARY_STATEMENTS))
                    new_idx = (current_idx + shift) % N_PRIMARY_STATEMENTS
                else:
                    new_idx = int(rng.integers(0, N_PRIMARY_STATEMENTS))
                rendered.append(render_statement(triple, new_idx))
            order = rng.permutation(len(rendered))
            rewrites.append(" ".join(rendered[i] for i in order))
    else:
        for _ in range(n):
            order = rng.permutation(len(sentences))
            rewrites.append(" ".join(sentences[i] for i in order))
    return rewrites


_QA_PREFIXES = ("", "Tell me: ", "Answer this: ", "Here is a question. ")


def gen_qa_rule_based(doc: Document, m: int, seed: int) -> list:
    """m (question, answer) pairs cycling facts and templates, answers verbatim."""
    triples = extract_triples(doc.text)
    if not triples:
        raise InsufficientFacts(f"document {doc.doc_id:#018x} encodes no facts")
    rng = np.random.default_rng([seed, doc.doc_id % (2 ** 63)])
    start = int(rng.integers(0, 64))
    pairs = []
    for j in range(m):
        triple = triples[j % len(triples)]
        cycle = j // len(triples)
        bank = RELATIONS[triple.relation].train_questions
        template = bank[(start + cycle) % len(bank)]
        prefix = _QA_PREFIXES[(cycle // len(bank)) % len(_QA_PREFIXES)]
        pairs.append((prefix + template.format(o=triple.object), triple.subject))
    return pairs


def build_dataset(doc: Document, n: int = 1, m: int = 3, augmenter=None,
                  seed: int = 0) -> AugmentedDataset:
    """Original plus n rewrites crossed with m QA pairs; |triples| = (n+1)*m."""
    if augmenter is not None:
        rewrites, qa_pairs = augmenter(doc, n, m)
    else:
        rewrites = rewrite_rule_based(doc, n, seed)
        qa_pairs = gen_qa_rule_based(doc, m, seed)
    return AugmentedDataset(doc_id=doc.doc_id,
                            rewrites=(doc.text, *rewrites),
                            qa_pairs=tuple(qa_pairs))


# ---------------------------------------------------------------------------
# synthetic corpus generation


@dataclass(frozen=True)
class SyntheticWorld:
    corpus: Corpus
    doc_triples: dict      # doc_id -> list[FactTriple]
    heldout_qa: dict       # doc_id -> list[(question, answer)]
    entities: frozenset


def gen_synthetic_corpus(num_docs: int, triples_per_doc: int = 3, seed: int = 0,
                         exclude_entities=()) -> SyntheticWorld:
    """Fabricated-entity corpus plus held-out QA rendered from eval templates."""
    if num_docs < 1:
        raise ValueError("num_docs must be >= 1")
    if not 1 <= triples_per_doc <= len(RELATION_ORDER):
        raise ValueError(f"triples_per_doc must be in 1..{len(RELATION_ORDER)}")
    rng = np.random.default_rng(seed)
    draw = _EntityDraw(rng, exclude=exclude_entities)

    docs = []
    doc_triples = {}
    heldout = {}
    entities = set()
    for _ in range(num_docs):
        primary = draw.take()
        entities.add(primary)
        relations = [RELATION_ORDER[i] for i in
                     rng.choice(len(RELATION_ORDER), size=triples_per_doc, replace=False)]
        triples = []
        sentences = []
        questions = []
        for rel_name in relations:
            subject = draw.take()
            entities.add(subject)
            triple = FactTriple(subject, rel_name, primary)
            triples.append(triple)
            sentences.append(render_statement(triple, int(rng.integers(0, N_PRIMARY_STATEMENTS))))
            eval_bank = RELATIONS[rel_name].eval_questions
            template = eval_bank[int(rng.integers(0, len(eval_bank)))]
            questions.append((template.format(o=primary), subject))
        text = " ".join(sentences)
        doc = Document(doc_id=content_hash(primary, text), title=primary, text=text)
        docs.append(doc)
        doc_triples[doc.doc_id] = triples
        heldout[doc.doc_id] = questions

    return SyntheticWorld(corpus=Corpus(docs), doc_triples=doc_triples,
                          heldout_qa=heldout, entities=frozenset(entities))


# Stands in for the SEP token inside pretraining text (see model.SEP_BYTE).
SEP_CHAR = "\x1e"


def _question_for(rng, triple: FactTriple, banks=("train", "eval")) -> str:
    relation = RELATIONS[triple.relation]
    bank = relation.train_questions if rng.choice(len(banks)) == 0 else relation.eval_questions
    return bank[int(rng.integers(0, len(bank)))].format(o=triple.object)


def _volatile_blocks(rng, count: int, draw) -> list:
    """Extraction drills whose facts contradict across blocks.

    A small entity pool is recombined at random, so the same question gets
    different answers in different blocks; only reading the in-block document
    can predict the answer. This forces context extraction instead of fact
    memorization, in both the separator format and the passage format.
    """
    pool = [draw.take() for _ in range(240)]
    blocks = []
    for _ in range(count):
        n_facts = int(rng.integers(1, 4))
        relations = [RELATION_ORDER[i] for i in
                     rng.choice(len(RELATION_ORDER), size=n_facts, replace=False)]
        obj = pool[int(rng.integers(0, len(pool)))]
        triples = []
        sentences = []
        for rel_name in relations:
            subject = pool[int(rng.integers(0, len(pool)))]
            triple = FactTriple(subject, rel_name, obj)
            triples.append(triple)
            sentences.append(render_statement(triple, int(rng.integers(0, N_PRIMARY_STATEMENTS))))
        text = " ".join(sentences)
        pick = triples[int(rng.integers(0, len(triples)))]
        question = _question_for(rng, pick)
        if rng.random() < 0.5:
            blocks.append(f"{text}{SEP_CHAR}{question}{SEP_CHAR}{pick.subject}")
        else:
            blocks.append(render_passage(1, text) + render_question(question)
                          + " " + pick.subject)
    return blocks


def build_pretrain_text(num_docs: int, triples_per_doc: int = 3, seed: int = 0,
                        exclude_entities=(), volatile_blocks: int = 600) -> tuple:
    """Pretraining text over a disjoint synthetic world; returns (text, entities).

    Blocks cover every format the model meets later: fact statements,
    closed-book QA in both question-template banks and both separator
    conventions, document/question/answer training-style sequences, passage
    extraction, and contradiction-rich extraction drills.
    """
    world = gen_synthetic_corpus(num_docs, triples_per_doc, seed,
                                 exclude_entities=exclude_entities)
    rng = np.random.default_rng([seed, 1])
    blocks = []
    docs = world.corpus.docs
    for pos, doc in enumerate(docs):
        triples = world.doc_triples[doc.doc_id]
        blocks.append(doc.text)

        for triple in triples:
            relation = RELATIONS[triple.relation]
            # training-sequence shape: document SEP question SEP answer
            question = _question_for(rng, triple)
            blocks.append(f"{doc.text}{SEP_CHAR}{question}{SEP_CHAR}{triple.subject}")
            # closed-book, separator format (warm-up shape)
            blocks.append(f"{_question_for(rng, triple)}{SEP_CHAR}{triple.subject}")
            # closed-book, prompt format, one template from each bank
            for bank in (relation.train_questions, relation.eval_questions):
                template = bank[int(rng.integers(0, len(bank)))]
                blocks.append(render_question(template.format(o=triple.object))
                              + " " + triple.subject)

        pick = triples[int(rng.integers(0, len(triples)))]
        question = _question_for(rng, pick)
        blocks.append(render_passage(1, doc.text) + render_question(question)
                      + " " + pick.subject)
        if pos % 6 == 0 and len(docs) >= 2:
            other = docs[(pos + 1) % len(docs)]
            passages = "".join(render_passage(i + 1, d.text)
                               for i, d in enumerate([doc, other]))
            blocks.append(passages + render_question(question) + " " + pick.subject)

    draw = _EntityDraw(rng, exclude=set(exclude_entities) | set(world.entities))
    blocks.extend(_volatile_blocks(rng, volatile_blocks, draw))

    order = rng.permutation(len(blocks))
    text = "\n\n".join(blocks[i] for i in order)
    return text, world.entities


def gen_warmup_qa(num_pairs: int, seed: int = 0, exclude_entities=()) -> list:
    """Standalone QA pairs over fabricated facts, for warm-up initialization.

    Entities come from a fixed slice and recur across pairs; what matters for
    warm-up is the question/answer shape, not fact uniqueness.
    """
    if num_pairs < 1:
        raise ValueError("num_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    draw = _EntityDraw(rng, exclude=exclude_entities)
    slice_size = min(max(num_pairs // 2, 16), 400)
    names = [draw.take() for _ in range(slice_size)]
    pairs = []
    for _ in range(num_pairs):
        rel_name = RELATION_ORDER[int(rng.integers(0, len(RELATION_ORDER)))]
        relation = RELATIONS[rel_name]
        subject = names[int(rng.integers(0, len(names)))]
        obj = names[int(rng.integers(0, len(names)))]
        template = relation.train_questions[int(rng.integers(0, len(relation.train_questions)))]
        pairs.append((template.format(o=obj), subject))
    return pairs


# ---------------------------------------------------------------------------
# external LLM augmenter


@dataclass(frozen=True)
class AugmenterEndpoint:
    base_url: str
    model: str
    timeout: float = 30.0
    max_retries: int = 3
    backoff: float = 0.5
    token_env: str = "AUGMENTER_TOKEN"


_REWRITE_INSTRUCTION = (
    "Rewrite the following document {n} times using different wording and "
    "sentence order while preserving every fact. Reply with a numbered list, "
    "one rewrite per line.\n\nDocument:\n{doc}")
_QA_INSTRUCTION = (
    "Write {m} question-answer pairs grounded in the following document. "
    "Reply with lines of the form 'Q: <question>' and 'A: <answer>'.\n\n"
    "Document:\n{doc}")


def _chat_request(endpoint: AugmenterEndpoint, prompt: str) -> str:
    body = json.dumps({
        "model": endpoint.model,
        "messages": [{"role": "user", "content": prompt}],
    }).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(endpoint.token_env)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    request = urllib.request.Request(endpoint.base_url, data=body, headers=headers)
    with urllib.request.urlopen(request, timeout=endpoint.timeout) as response:
        payload = json.loads(response.read().decode("utf-8"))
    choice = payload["choices"][0]
    if "message" in choice:
        return choice["message"]["content"]
    return choice["text"]


def _parse_numbered(text: str, n: int) -> list:
    items = []
    for line in text.splitlines():
        m = re.match(r"\s*\d+[.)]\s*(.+)", line)
        if m:
            items.append(m.group(1).strip())
    if len(items) < n:
        raise MalformedResponse(f"expected {n} rewrites, parsed {len(items)}")
    return items[:n]


def _parse_qa(text: str, m: int) -> list:
    pairs = []
    question = None
    for line in text.splitlines():
        qm = re.match(r"\s*Q:\s*(.+)", line)
        am = re.match(r"\s*A:\s*(.+)", line)
        if qm:
            question = qm.group(1).strip()
        elif am and question is not None:
            pairs.append((question, am.group(1).strip()))
            question = None
    if len(pairs) < m:
        raise MalformedResponse(f"expected {m} QA pairs, parsed {len(pairs)}")
    return pairs[:m]


def augment_llm(doc: Document, n: int, m: int, endpoint: AugmenterEndpoint) -> AugmentedDataset:
    """Augment via an external chat-completion API with retry and backoff."""

    def call(prompt, parse):
        last = None
        for attempt in range(endpoint.max_retries):
            if attempt and endpoint.backoff:
                time.sleep(endpoint.backoff * (2 ** (attempt - 1)))
            try:
                return parse(_chat_request(endpoint, prompt))
            except (urllib.error.URLError, OSError, json.JSONDecodeError, KeyError) as exc:
                last = EndpointUnreachable(f"augmenter endpoint failed: {exc}")
            except MalformedResponse as exc:
                last = exc
        raise last

    rewrites = call(_REWRITE_INSTRUCTION.format(n=n, doc=doc.text),
                    lambda text: _parse_numbered(text, n)) if n > 0 else []
    qa_pairs = call(_QA_INSTRUCTION.format(m=m, doc=doc.text),
                    lambda text: _parse_qa(text, m))
    return AugmentedDataset(doc_id=doc.doc_id, rewrites=(doc.text, *rewrites),
                            qa_pairs=tuple(qa_pairs))


def llm_augmenter(endpoint: AugmenterEndpoint):
    """Adapter making augment_llm usable as a build_dataset augmenter."""
    def augmenter(doc, n, m):
        dataset = augment_llm(doc, n, m, endpoint)
        return list(dataset.rewrites[1:]), list(dataset.qa_pairs)
    return augmenter
