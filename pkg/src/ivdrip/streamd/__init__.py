"""Multi-stream engine: sources, batching, routing, pipeline runs and the CLI."""
from .container import ContainerError, DrpvHeader, iter_drpv, read_drpv, write_drpv
from .engine import (LiveSource, RawFrame, RoutingError, StreamBatch, StreamSource, collect_batch,
                     infer_and_route, preprocess)
from .pipeline import (BenchResult, PipelineConfig, PipelineConfigError, ThroughputReport, bench, emit_heatmap,
                       load_config, max_streams, parse_config, run, run_pipeline)
