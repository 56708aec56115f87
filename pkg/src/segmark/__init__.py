"""segmark: multi-bit text watermarking with capacity-adaptive segmentation.

A message is embedded bit by bit into a token stream by biasing the logits
of a keyed color split of the vocabulary; a per-segment confidence
inequality decides, token by token, when a segment holds its bit and the
next one starts. Extraction re-derives the segmentation by minimizing a
dynamic-programming loss, which keeps the message readable after token
insertions and deletions.
"""

from .coloring import ColorPartition, SecretKey, color_of, green_mask, partition_for
from .embed import (EmbedConfig, EmbedOutput, WatermarkMessage, build_manifest,
                    capacity_probe, embed, generate_plain)
from .extract import (CostMatrix, ExtractConfig, ExtractionResult,
                      InfeasibleSegmentation, SegmentReport, build_costs,
                      color_text, dp_segment, extract, identify_padding,
                      naive_extract, update_epsilons)
from .sources import (BridgeSource, LogitsSource, LogitsSourceDescriptor,
                      NgramSource, SourceError, SyntheticSource, TokenSequence,
                      TraceSource, Vocabulary, apply_repetition_penalty,
                      load_ngram, make_source, next_logits, read_trace,
                      save_ngram, teacher_force, train_ngram, write_trace)
from .stats import (ConfidenceConfig, SegmentStats, StepStat, biased_mass,
                    boundary_satisfied, color_loss, default_lambda,
                    expected_desired, f_statistic, green_mass, normal_cdf,
                    normal_quantile, prior_estimate, seg_loss,
                    segment_stats_push, total_loss)

__version__ = "0.1.0"
