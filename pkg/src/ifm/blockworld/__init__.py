"""Grid manipulation environment, scripted expert, and dataset storage."""

from ifm.blockworld.dataset import Episode, SegmentAnnotation, Step, read_dataset, stream_dataset, write_dataset
from ifm.blockworld.expert import Trace, expert_action, next_move, next_subtask_words, run_expert, segment_runs
from ifm.blockworld.grammar import ALL_WORDS, COLOR_NAMES
from ifm.blockworld.world import (
    DIFFICULTIES,
    Block,
    Goal,
    GridConfig,
    Placement,
    WorldState,
    instruction_words,
    make_qa,
    parse_instruction,
    placements,
    plan_lower_bound,
    proprio,
    render,
    sample_task,
    step,
    subtask_done,
    success,
)

__all__ = [
    "ALL_WORDS",
    "COLOR_NAMES",
    "DIFFICULTIES",
    "Block",
    "Episode",
    "Goal",
    "GridConfig",
    "Placement",
    "SegmentAnnotation",
    "Step",
    "Trace",
    "WorldState",
    "expert_action",
    "instruction_words",
    "make_qa",
    "next_move",
    "next_subtask_words",
    "parse_instruction",
    "placements",
    "plan_lower_bound",
    "proprio",
    "read_dataset",
    "render",
    "run_expert",
    "sample_task",
    "segment_runs",
    "step",
    "stream_dataset",
    "subtask_done",
    "success",
    "write_dataset",
]
