"""Bottom-up score maps, temporal coupling and detection."""
from .detect import (DetectConfig, Detection, ProposalSet, WindowMaps, describe_frame, detect,
                     detect_pair, nms, pair_window, retrieve_parse, st_window_score,
                     write_detections)
from .dt import distance_transform, dt_gather, flow_backward, flow_forward
from .framepass import Constraints, FrameMaps, FrameScorer, ScoreMap, backtrace, frame_pass
from .temporal import CoupledMaps, LBPConfig, temporal_couple
