"""Closed word-level grammar for instructions, subtasks, and QA probes."""

COLOR_NAMES = ("red", "green", "blue", "yellow", "orange", "purple")

VERBS = ("stack", "layer", "at", "pick", "place", "on", "table", "done")

QA_WORDS = ("what", "color", "empty")

DIGITS = tuple(str(i) for i in range(10))

ALL_WORDS = COLOR_NAMES + VERBS + QA_WORDS + DIGITS
