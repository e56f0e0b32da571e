from .endpoints import HashMockEndpoint, HttpEndpoint, ScriptedEndpoint, TransportError, make_endpoint
from .prompts import AXES, build_prompt
from .protocol import (
    AggregateReport,
    CategoryScores,
    DroppedSample,
    FormatFailure,
    JudgeRecord,
    JudgeRequest,
    aggregate,
    axis_overall,
    canonical_response,
    frame_indices,
    make_request,
    parse_response,
    read_records,
    report_rows,
    sample_frames,
    score_all,
    score_with_retries,
    write_results,
)
