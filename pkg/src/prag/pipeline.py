"""Online inference: retrieve, merge-and-plug adapters, generate.

Five modes share one prompt template. closed_book sees only the question;
in_context prepends retrieved passages; in_context_augmented prepends the
stored augmentation instead; parametric plugs the merged adapter delta into
the FFN and keeps the question-only prompt; combined does both injections
with the same retrieved set. Adapter application is ephemeral: each query
builds its own merged delta and the base weights are never touched.
"""

import time
from dataclasses import dataclass, field
from enum import Enum

from . import adapters as adapters_mod
from .adapters import AdapterConfig
from .errors import NoDocuments, Overlong
from .model import EffectiveWeights, ModelParams, generate_greedy
from .retriever import Corpus, InvertedIndex, RetrievalResult, retrieve_top_k
from .store import ParametricCorpus
from .text import (
    BOS_ID,
    EOS_ID,
    decode_bytes,
    encode_bytes,
    render_passage,
    render_question,
    strip_specials,
)

DEFAULT_GEN_BUDGET = 32


class Mode(Enum):
    CLOSED_BOOK = "closed_book"
    IN_CONTEXT = "in_context"
    IN_CONTEXT_AUGMENTED = "in_context_augmented"
    PARAMETRIC = "parametric"
    COMBINED = "combined"

    @classmethod
    def parse(cls, name: str) -> "Mode":
        for mode in cls:
            if mode.value == name:
                return mode
        raise ValueError(f"unknown mode {name!r}")


RETRIEVAL_MODES = (Mode.IN_CONTEXT, Mode.IN_CONTEXT_AUGMENTED, Mode.PARAMETRIC, Mode.COMBINED)


@dataclass
class QueryResult:
    answer: str
    mode: str
    retrieved: RetrievalResult
    merged_doc_ids: list
    prompt_token_count: int
    generated_token_count: int
    timing: dict                      # retrieve_ms / update_ms / generate_ms
    fell_back_closed_book: bool = False
    missing_adapter_doc_ids: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "answer": self.answer,
            "mode": self.mode,
            "retrieved": [[f"{doc_id:016x}", score] for doc_id, score in self.retrieved.ranked],
            "merged_doc_ids": [f"{doc_id:016x}" for doc_id in self.merged_doc_ids],
            "prompt_token_count": self.prompt_token_count,
            "generated_token_count": self.generated_token_count,
            "timing": self.timing,
            "fell_back_closed_book": self.fell_back_closed_book,
            "missing_adapter_doc_ids": [f"{d:016x}" for d in self.missing_adapter_doc_ids],
        }


def build_prompt(mode: Mode, question: str, passages, max_seq_len: int,
                 gen_budget: int = DEFAULT_GEN_BUDGET) -> list:
    """Token ids for the fixed prompt template, identical across modes.

    ``passages`` must be empty for closed_book and parametric; each entry is
    rendered as "Passage i: <text>" ahead of the question line.
    """
    if mode in (Mode.CLOSED_BOOK, Mode.PARAMETRIC) and passages:
        raise ValueError(f"{mode.value} takes no in-context passages")
    parts = [render_passage(i + 1, text) for i, text in enumerate(passages)]
    parts.append(render_question(question))
    ids = [BOS_ID] + encode_bytes("".join(parts))
    if len(ids) > max_seq_len - gen_budget:
        raise Overlong(
            f"prompt needs {len(ids)} tokens; context {max_seq_len} minus "
            f"generation budget {gen_budget} leaves {max_seq_len - gen_budget}")
    return ids


@dataclass
class Pipeline:
    """Initialized components for answering queries."""

    corpus: Corpus
    index: InvertedIndex
    base: ModelParams
    store: ParametricCorpus | None = None
    adapter_config: AdapterConfig = field(default_factory=AdapterConfig)
    k: int = 3
    gen_budget: int = DEFAULT_GEN_BUDGET

    def answer(self, question: str, mode: Mode | str, k: int | None = None,
               forced_doc_ids=None) -> QueryResult:
        """Retrieve, update, generate. ``forced_doc_ids`` overrides retrieval
        (oracle evaluation); the base model is untouched afterwards."""
        if isinstance(mode, str):
            mode = Mode.parse(mode)
        k = self.k if k is None else k
        if mode in RETRIEVAL_MODES and k < 1:
            raise ValueError("k must be >= 1 in retrieval modes")

        t0 = time.perf_counter()
        fell_back = False
        if mode is Mode.CLOSED_BOOK:
            retrieved = RetrievalResult(ranked=[])
        elif forced_doc_ids is not None:
            retrieved = RetrievalResult(ranked=[(d, 0.0) for d in forced_doc_ids][:k])
        else:
            retrieved = retrieve_top_k(self.index, question, k)
        if mode in RETRIEVAL_MODES and len(retrieved) == 0:
            mode, fell_back = Mode.CLOSED_BOOK, True
        t1 = time.perf_counter()

        merged_ids: list = []
        missing: list = []
        context_docs: list = []
        delta = None
        if mode in (Mode.PARAMETRIC, Mode.COMBINED):
            if self.store is None:
                raise ValueError(f"{mode.value} mode requires a parametric corpus")
            result = self.store.get_many(retrieved.doc_ids())
            missing = result.missing
            if result.found:
                delta = adapters_mod.merge(result.found)
                merged_ids = list(delta.source_doc_ids)
            if mode is Mode.PARAMETRIC:
                # missing adapters fall back to in-context injection
                context_docs = [d for d in retrieved.doc_ids() if d in missing]
            else:
                context_docs = retrieved.doc_ids()
        elif mode is Mode.IN_CONTEXT:
            context_docs = retrieved.doc_ids()
        elif mode is Mode.IN_CONTEXT_AUGMENTED:
            context_docs = retrieved.doc_ids()

        passages = self._render_passages(mode, context_docs)
        weights = EffectiveWeights(base=self.base, delta=delta)
        t2 = time.perf_counter()

        prompt_mode = mode if not passages else (
            Mode.IN_CONTEXT if mode in (Mode.PARAMETRIC,) else mode)
        prompt = build_prompt(prompt_mode, question, passages,
                              self.base.config.max_seq_len, self.gen_budget)
        sequence = generate_greedy(weights, prompt, self.gen_budget)
        generated = sequence[len(prompt):]
        answer_text = decode_bytes(strip_specials(generated)).strip()
        t3 = time.perf_counter()

        return QueryResult(
            answer=answer_text,
            mode=mode.value,
            retrieved=retrieved,
            merged_doc_ids=merged_ids,
            prompt_token_count=len(prompt),
            generated_token_count=len(generated),
            timing={
                "retrieve_ms": (t1 - t0) * 1e3,
                "update_ms": (t2 - t1) * 1e3,
                "generate_ms": (t3 - t2) * 1e3,
            },
            fell_back_closed_book=fell_back,
            missing_adapter_doc_ids=missing,
        )

    def _render_passages(self, mode: Mode, doc_ids) -> list:
        passages = []
        for doc_id in doc_ids:
            doc = self.corpus.get(doc_id)
            if doc is None:
                continue
            if mode is Mode.IN_CONTEXT_AUGMENTED and self.store is not None:
                dataset = self.store.get_augmented(doc_id)
                if dataset is not None:
                    passages.extend(dataset.rewrites)
                    passages.append(" ".join(f"Q: {q} A: {a}" for q, a in dataset.qa_pairs))
                    continue
            passages.append(doc.text)
        return passages
