"""Reasoner prompt assembly, few-shot selection and end-to-end answering.

Prompt layout (few-shot block omitted when there are no examples)::

    Question: <example question>
    Answer: <example answer>

    ...

    <question> col : ... row 1 : ... [HEAD] ... [REL] ... [TAIL] ...

Examples are separated by blank lines; the target segment is everything
after the last blank line.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..retrieve import EmbeddingProvider, RetrievalEngine, ScoredTriple, dot_scores, embed_many
from ..serialize import build_reasoner_input
from ..table import Question
from .generation import GenerationClient, GenerationError

FEWSHOT_TEMPLATE = "Question: {question}\nAnswer: {answer}"


def select_fewshot_examples(
    q: str,
    train_questions: Sequence[Question],
    provider: EmbeddingProvider,
    count: int = 5,
) -> list[Question]:
    """The ``count`` training questions most similar to ``q``, most similar last."""
    if not train_questions:
        raise ValueError("empty training set")
    if count <= 0:
        return []
    pool = sorted(train_questions, key=lambda x: x.id)
    qv = np.asarray(provider.embed_query(q), dtype=np.float64)
    sims = dot_scores(embed_many(provider, [x.question for x in pool], "query"), qv)
    order = sorted(range(len(pool)), key=lambda i: (-sims[i], pool[i].id))[:count]
    return [pool[i] for i in reversed(order)]


def format_examples(examples: Sequence[Question]) -> str:
    return "\n\n".join(FEWSHOT_TEMPLATE.format(question=e.question, answer=e.answer) for e in examples)


def assemble_prompt(
    question: str,
    table,
    retrieved: Sequence[ScoredTriple],
    labels,
    examples: Sequence[Question] = (),
    char_budget: int | None = None,
) -> tuple[str, list[ScoredTriple]]:
    """Build the prompt, dropping lowest-scored triples until it fits ``char_budget``."""
    kept = list(retrieved)
    prefix = format_examples(examples)
    prefix = prefix + "\n\n" if prefix else ""
    while True:
        prompt = prefix + build_reasoner_input(question, table, [s.triple for s in kept], labels)
        if char_budget is None or len(prompt) <= char_budget or not kept:
            return prompt, kept
        kept.pop()


@dataclass
class AnswerTrace:
    question: str
    table_id: str
    k: int
    prompt: str
    retrieved: list[ScoredTriple]
    answer: str | None = None
    question_id: str | None = None
    error: str | None = None
    retrieval_report: dict = field(default_factory=dict)

    def to_json(self, labels) -> dict:
        return {
            "question_id": self.question_id,
            "question": self.question,
            "table_id": self.table_id,
            "k": self.k,
            "retrieved": [s.to_json(labels) for s in self.retrieved],
            "prompt": self.prompt,
            "answer": self.answer,
            "error": self.error,
        }


class AnswerError(RuntimeError):
    def __init__(self, message: str, trace: AnswerTrace):
        super().__init__(message)
        self.trace = trace


def answer_question(
    question: str,
    table_id: str,
    engine: RetrievalEngine,
    gen: GenerationClient,
    k: int = 20,
    method: str = "multistage",
    examples: Sequence[Question] = (),
    char_budget: int | None = None,
    max_tokens: int = 64,
    question_id: str | None = None,
) -> AnswerTrace:
    """Retrieve ``k`` triples, build the prompt and decode greedily.

    ``k=0`` gives the table-only condition through the same code path.
    """
    report: dict = {}
    retrieved = engine.retrieve(question, table_id, k, method, report=report) if k > 0 else []
    labels = engine.labels(table_id)
    prompt, kept = assemble_prompt(question, engine.tables[table_id], retrieved, labels, examples, char_budget)
    trace = AnswerTrace(question, table_id, k, prompt, kept, question_id=question_id, retrieval_report=report)
    try:
        trace.answer = gen.generate(prompt, max_tokens=max_tokens, temperature=0.0)
    except Exception as e:
        trace.error = str(e)
        raise AnswerError(f"generation failed: {e}", trace) from e
    return trace


__all__ = [
    "AnswerError",
    "AnswerTrace",
    "GenerationError",
    "answer_question",
    "assemble_prompt",
    "select_fewshot_examples",
]
