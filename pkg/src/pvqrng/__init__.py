"""Desk-scale simulator of a publicly verifiable three-stream QRNG.

The pipeline: an entangled-photon bench produces correlated bit triplets
whose XOR is zero; sifting removes error rounds and measures the QBER;
one stream goes to a public verifier that runs a statistical battery;
on a passing verdict the user keeps a second stream as certified private
randomness and seals or deletes the third.
"""

from .bench import (
    BenchConfig,
    CoincidenceRecord,
    DetectionEvent,
    Detector,
    EventStream,
    VisibilityFit,
    collect_coincidences,
    find_coincidences,
    measure_chsh,
    run_generation,
    simulate_run,
    visibility_sweep,
)
from .bitio import BitStream, FormatError, decode_stream, encode_stream, read_stream_file, stream_digest, write_stream_file
from .protocol import Disposal, FinalOutput, Session, SessionPhase, SiftedStreams, sift
from .quantum import (
    CHSH_OPTIMAL_ANGLES,
    DensityMatrix,
    NoiseParams,
    OutcomeDistribution,
    OutcomeTriplet,
    PureState,
    TripletBatch,
    apply_isotropic_noise,
    bell_state,
    chsh_value,
    correlation,
    outcome_distribution,
    project_qubit,
    sample_triplets,
    tripartite_state,
)
from .stats import (
    BatteryConfig,
    BatteryReport,
    TestResult,
    autocorrelation_test,
    block_entropy,
    block_frequency_test,
    ks_uniformity,
    monobit_test,
    mutual_information,
    run_battery,
    runs_test,
)
from .verifier import Verdict, VerifierConfig, VerifierServer, submit, verify_file

__version__ = "0.1.0"
