"""Central configuration for the Macau factorization engine."""

import os

# Directory and level for the rotating log file
LOG_DIR = os.getenv("MACAU_LOG_DIR", "logs")
LOG_LEVEL = os.getenv("MACAU_LOG_LEVEL", "INFO")

# Worker threads for latent sampling and CG right-hand sides
DEFAULT_THREADS = int(os.getenv("MACAU_THREADS", "1"))

# Conjugate gradient relative residual and iteration cap (effective cap is min(F, this))
CG_TOL = float(os.getenv("MACAU_CG_TOL", "1e-6"))
CG_MAXITER = int(os.getenv("MACAU_CG_MAXITER", "1000"))

# Largest dense feature dimension solved directly when no override is given
DIRECT_MAX_FEATURES = int(os.getenv("MACAU_DIRECT_MAX_FEATURES", "20000"))

# Instances per latent-sampling block; each block owns one RNG stream
LATENT_BLOCK_SIZE = int(os.getenv("MACAU_LATENT_BLOCK_SIZE", "256"))

# Cap on observed cells used for the per-sweep train RMSE
RMSE_SUBSAMPLE = int(os.getenv("MACAU_RMSE_SUBSAMPLE", "100000"))

# Default chain length and burn-in
DEFAULT_TOTAL = int(os.getenv("MACAU_TOTAL_ITERATIONS", "1000"))
DEFAULT_BURNIN = int(os.getenv("MACAU_BURNIN", "800"))
