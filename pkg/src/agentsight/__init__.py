"""agentsight: boundary-tracing observability for LLM agents.

Correlates intercepted LLM traffic (intent) with kernel-visible system
activity (actions) into compacted causal traces, runs rule-based
detectors over them, and optionally asks an observer LLM for a verdict.
"""

from .analyzers import (Finding, detect_exfiltration_chain,
                        detect_reasoning_loop, detect_retry_contention)
from .correlation import (ArtifactToken, CausalLink, CausalTrace,
                          compact_trace, correlate_stream, extract_artifacts,
                          score_link)
from .events import (BoundaryEvent, IdentityInvalid, ProcessIdentity,
                     SchemaMismatch, order_key, validate_event)
from .ingestion import EventSource, MalformedLine, parse_trace_line, read_trace
from .lineage import LineageTree, UnknownIdentity
from .observer import (MockBackend, ObserverClient, Verdict,
                       build_analyst_prompt, parse_verdict)
from .pipeline import ReplayResult, replay
from .reassembly import (IntentRecord, ReassemblyEngine, SseParser, TlsFlow,
                         assemble_intent, parse_sse)

__version__ = "0.1.0"
