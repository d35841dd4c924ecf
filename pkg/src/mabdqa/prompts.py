"""Prompt templates sent to the chat model.

Template bodies are kept verbatim; placeholders use ``str.format`` syntax.
Rendering strips nothing except what the template itself defines, so the
rendered prompt is byte-stable for a given set of fields.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Template:
    id: str
    section: str
    fields: tuple[str, ...]
    text: str


DECOMPOSE = "decompose"
JUDGE = "judge"
GRADE = "grade"
ANSWER = "answer"
QUESTION_REFLECTION = "question_reflection"
ANSWER_REFLECTION = "answer_reflection"
HYPERGRAPH_SUMMARY = "hypergraph_summary"
REFINE = "refine"

_DECOMPOSE_TEXT = """\
As an AI agent specialized in document retrieval query processing, your primary task is to handle each query by first ignoring any irrelevant information (such as output format requests or non-retrieval instructions).

Then, extract meaningful entities and key phrases that capture the core intent of the query.

Finally, output the result as a comma-separated list of key phrases, for example: "key_phrase1, key_phrase2, ...". Ensure clarity and conciseness throughout."""

_JUDGE_TEXT = """\
# GOAL # You are a Retrieval Expert, and your task is to evaluate how relevant the input document page is to the given query.

Rate the relevance on a scale of 1 to 5, where:

- 5: Highly relevant - contains COMPLETE information to fully answer the query (be cautious with this rating)

- 4: Very relevant - contains most information needed but may lack some details (be cautious with this rating)

- 3: Moderately relevant - contains some useful information but significant gaps remain

- 2: Slightly relevant - has minor connection to the query

- 1: Irrelevant - contains no information related to the query

# INSTRUCTION # Based on previous retrieval system judgment, we believe that this document snapshot is at least {priori} relevant. Please first read the given query, think about what specific information is required to answer that query comprehensively, and then carefully examine the document snapshot.

# IMPORTANT # Before giving a score of 4 or 5, verify that the page actually contains the specific facts needed to answer the query, not just related information.

# QUERY# {query} Think step by step about the relevance, then provide just a single number (1-5) representing your judgment."""

_GRADE_TEXT = """\
Question: {question}

Predicted Answer: {answer}

Ground Truth Answer: {gt}

Please evaluate if the predicted answer is correct compared to the ground truth, considering the following criteria:

- If the Ground Truth Answer is "Not answerable":

- And the Predicted Answer indicates that the model cannot answer, then it is considered CORRECT (score 1).

- Otherwise:

- Score based on whether the Predicted Answer is factually and logically consistent with the Ground Truth Answer.

Score the answer on Binary correctness (0-1): 1 if the answer is correct, 0 if it is incorrect
Return only a JSON-parsable string in the format:
{{"binary_correctness": <score>}}

Output:"""

_ANSWER_TEXT = """\
Using the provided {num_images} document screenshots, answer this question: "{question}"

Requirements:

- Reply must be extremely concise (as short as possible)

- Use only information visible in the screenshots

- If the answer cannot be clearly found, respond exactly: "Not answerable"

Answer:"""

_QUESTION_REFLECTION_TEXT = """\
Based on the provided {num_images} document screenshots, rephrase the following question to make it clearer and more specific.

Original question: "{question}"

Requirements for rewriting:

1. If the question is clear and can be answered using ONLY information in the screenshots, keep it essentially the same

2. If the question is ambiguous or vague, clarify it based on what information appears to be available in the screenshots

3. If the question cannot be answered with the screenshots, note this, but still try to rephrase for clarity

4. The rewritten question should be specific, direct, and answerable using visible document content

5. Keep the core intent of the original question

6. If screenshots show specific entities (names, dates, numbers, terms), use them in the rewritten question

7. Output only the rewritten question, nothing else

Rewritten question:"""

_ANSWER_REFLECTION_TEXT = """\
You will be given a question and a corresponding answer. Your task is to determine whether the answer addresses the question, regardless of whether the answer is correct or not.

Focus only on whether the answer responds to the question and covers the necessary points (i.e., no essential content is missing).

If no answer is provided, consider it as not answering.

Question: {question}

Answer: {answer}

Did the answer address the question? (yes/no)"""

_HYPERGRAPH_SUMMARY_TEXT = """\
Analyze the following question and identify the core concepts and relationships that need to be understood to answer it properly.

Question: "{question}"
{focus}

Requirements:

- Break down the question into fundamental components

- Identify what specific information is needed to answer each component

- Note any implicit relationships or assumptions in the question

- Be concise but thorough in your analysis

Analysis:"""

_REFINE_TEXT = """\
Based on the following context, provide a better answer to the question through careful reasoning.

Question: {question}

Initial incomplete answer: {initial_answer}

Relevant information summary: {summary}

CRITICAL THINKING REQUIREMENTS:

1. First, analyze what the question is REALLY asking for

2. Compare the initial answer with the available information

3. Identify gaps or inaccuracies in the initial answer

4. Synthesize information from the summary to fill these gaps

5. Formulate a coherent response that directly addresses the question

DO NOT simply copy phrases from the summary. Instead, use the information to construct a thoughtful answer.

If the summary indicates no relevant information, respond: "Not answerable"

Reasoning process:

- [Analyze the question requirements]

- [Compare initial answer with evidence]

- [Identify what needs to be improved]

- [Synthesize the improved answer]

Improved answer:"""

TEMPLATES: dict[str, Template] = {
    t.id: t
    for t in [
        Template(DECOMPOSE, "B.1", (), _DECOMPOSE_TEXT),
        Template(JUDGE, "B.2", ("priori", "query"), _JUDGE_TEXT),
        Template(GRADE, "B.3", ("question", "answer", "gt"), _GRADE_TEXT),
        Template(ANSWER, "B.4", ("num_images", "question"), _ANSWER_TEXT),
        Template(QUESTION_REFLECTION, "B.5", ("num_images", "question"), _QUESTION_REFLECTION_TEXT),
        Template(ANSWER_REFLECTION, "B.6", ("question", "answer"), _ANSWER_REFLECTION_TEXT),
        Template(HYPERGRAPH_SUMMARY, "B.7", ("question", "hypergraph"), _HYPERGRAPH_SUMMARY_TEXT),
        Template(REFINE, "B.8", ("question", "initial_answer", "summary"), _REFINE_TEXT),
    ]
}

NOT_ANSWERABLE = "Not answerable"


class TemplateError(KeyError):
    pass


def get_template(template_id: str) -> Template:
    try:
        return TEMPLATES[template_id]
    except KeyError:
        # accept the section label as an alias
        for t in TEMPLATES.values():
            if t.section == template_id:
                return t
        raise TemplateError(f"unknown prompt template {template_id!r}") from None


def render(template_id: str, fields: dict) -> str:
    """Substitute ``fields`` into the template; missing fields raise :class:`TemplateError`."""
    t = get_template(template_id)
    missing = [f for f in t.fields if f not in fields]
    if missing:
        raise TemplateError(f"template {t.id!r} missing fields {missing}")
    values = {f: str(fields[f]) for f in t.fields}
    if t.id == HYPERGRAPH_SUMMARY:
        hg = values.pop("hypergraph")
        values["focus"] = (
            "Key aspects to focus on: " + hg
            if hg
            else "Identify the key concepts and relationships in this question."
        )
    return t.text.format(**values)
