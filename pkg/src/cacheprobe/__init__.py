"""Cache-replacement simulation, phase analysis and probes of a learned
eviction model."""

from .cachesim import (CacheConfig, ContractViolation, SimResult, policy_belady,
                       policy_lru, policy_phase_freq, rolling_hit_rate, simulate)
from .model import (CachingModel, ModelConfig, forward, load_checkpoint, model_policy,
                    record_activations, save_checkpoint, train_imitation)
from .phases import (PhaseLabeling, find_phases, label_agreement, phase_frequency_table,
                     slice_features)
from .probe import (ActivationRecord, compare_records, correlate_with_phases, pca,
                    pearson)
from .streams import Stream, detect_streams, keep_stream_suffix, remove_stream
from .trace import (MemoryAccess, Trace, TraceError, parse_trace, read_trace,
                    reuse_profile, serialize_trace, write_trace)

__version__ = "0.1.0"
