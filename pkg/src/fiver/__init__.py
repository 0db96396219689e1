"""fiver: file transfer with pluggable end-to-end integrity verification.

The core strategy runs transfer and checksum of the same file concurrently,
sharing one pass of file I/O through a bounded synchronized queue; the other
strategies (sequential, file-level and block-level pipelining, chunked
recovery, and the hybrid router) exist for comparison, recovery, and
reliability trade-offs.
"""
from .bench import (
    ManifestEntry,
    MatrixCell,
    ThrottleConfig,
    TokenBucket,
    emit_report,
    generate_dataset,
    load_manifest,
    parse_matrix,
    run_experiment,
    throttle,
    to_file_metas,
    write_transfer_report,
)
from .endpoint import (
    Receiver,
    SenderSession,
    TransferOptions,
    receiver_context,
    transfer,
)
from .faults import FaultInjector, FaultMode, FaultSpec, flip_bit, schedule_faults
from .hashio import DigestState, QueueClosedError, SharedQueue
from .model import (
    ChunkSpec,
    Digest,
    FileMeta,
    FileRecord,
    HashAlg,
    Strategy,
    StrategyChoice,
    TransferPlan,
    TransferReport,
    VerifyOutcome,
    chunk_layout,
    overhead,
    parse_dataset_spec,
    parse_size,
    render_dataset_spec,
)
from .strategies import select_hybrid
from .wire import Frame, HandshakeError, ProtocolError, TransportError

__version__ = "0.1.0"
