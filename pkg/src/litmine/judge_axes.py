"""The five grading axes and their wire keys.

Kept in a leaf module so both the oracle layer (response validation) and
the judge (verdict bookkeeping) can import them without a cycle.
"""

from __future__ import annotations

from enum import Enum


class JudgeAxis(Enum):
    SUPPORT_FIDELITY = "support_fidelity"
    TASK_RELEVANCE = "task_relevance"
    ENTITY_ATTRIBUTION = "entity_attribution"
    LABEL_CORRECTNESS = "label_correctness"
    ACCURACY = "accuracy"


AXIS_KEYS: tuple[str, ...] = tuple(axis.value for axis in JudgeAxis)

# Axis wording handed verbatim to the oracle adapter. The engine never
# interprets this text; only the all-axes-pass keep rule is enforced here.
DEFAULT_RUBRIC: dict[str, str] = {
    JudgeAxis.SUPPORT_FIDELITY.value: (
        "Pass when the support text is traceable to the source passage or its "
        "immediate surroundings without distortion or invented detail; "
        "paraphrase is acceptable, fabrication is not."),
    JudgeAxis.TASK_RELEVANCE.value: (
        "Pass when the record is the kind of data the task asks for; "
        "fail out-of-scope statements, however accurate."),
    JudgeAxis.ENTITY_ATTRIBUTION.value: (
        "Pass when the primary entity named by the record is the actual "
        "subject of the claim in the support text, directly or via a "
        "recognized synonym."),
    JudgeAxis.LABEL_CORRECTNESS.value: (
        "Pass when the headline label matches what the support text states; "
        "auxiliary fields do not count against this axis."),
    JudgeAxis.ACCURACY.value: (
        "Pass when the record's core factual claim is consistent with the "
        "source and nothing in it contradicts or invents source content."),
}
