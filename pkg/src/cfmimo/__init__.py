"""Fronthaul-limited user-centric cell-free massive MIMO toolkit.

Builds random network drops, estimates channels from uplink training,
forms cooperative zero-forcing precoders per CB cluster, evaluates the
statistical-CSI achievable spectral efficiency by Monte Carlo, and
maximizes the sum SE over per-(user, cluster) power coefficients under
per-AP power and fronthaul constraints.
"""

__version__ = "0.1.0"

from .channel import (ChannelEstimate, draw_channels, estimate_general,
                      estimate_orthogonal)
from .clustering import (Association, CBPartition, ClusterSets, ZFInfeasibleError,
                         associate_users, derive_sets, exhaustive_association,
                         partition_cb)
from .config import SystemConfig, dump_config, load_config
from .fronthaul import (FronthaulParams, fh_beamforming, fh_data, k_max,
                        pa_complexity_counts, zf_flops)
from .harness import (ExperimentResult, emit_outputs, oracle_comparison,
                      run_experiment, sweep)
from .power_opt import (PowerSolution, epa, lower_bound_rate, optimize_power,
                        penalty_T, penalty_upper, solve_subproblem,
                        upper_bound_rate)
from .precoding import (CollectiveEstimate, PrecoderBlocks, build_collective,
                        mrt_precoder, zf_precoder)
from .se_metrics import (MomentCache, assemble_omega_xi, build_eta_tilde,
                         estimate_moments, load_cache, rate_k, rate_k_direct,
                         save_cache, sum_se)
from .topology import (Topology, generate_topology, large_scale_fading,
                       path_loss_db, save_topology_csv, wrap_distance)
