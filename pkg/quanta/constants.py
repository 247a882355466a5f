# QuanTA - Constants Module
# Numerical defaults, file-format codes and reference model figures

# Scalar types
TRAIN_DTYPES = ("float64", "float32")

# Gate initialization
DEFAULT_INIT_SCALE = 1.0
GAUSSIAN_INIT = "gaussian"
NEAR_IDENTITY_INIT = "near-identity"  # I + noise, keeps deep stacks well conditioned
INIT_MODES = (GAUSSIAN_INIT, NEAR_IDENTITY_INIT)

# LoRA settings
LORA_ALPHA = 16.0
LORA_INIT_SCALE = 1.0

# Numerical rank (tolerance defaults to machine epsilon of the input dtype)
SENSITIVITY_WINDOW = 10.0  # singular values within this factor of the threshold are flagged

# Gradient checking
GRAD_CHECK_STEP = 1e-5
GRAD_CHECK_TOLERANCE = 1e-6
GRAD_CHECK_BATCH = 3

# Training defaults (desk scale)
OPTIMIZERS = ("adam", "sgd")
DEFAULT_OPTIMIZER = "adam"
DEFAULT_LEARNING_RATE = 1e-2
DEFAULT_STEPS = 2000
DEFAULT_BATCH_SIZE = 128
LOG_EVERY = 100

# Universality fitting
FIT_MAX_ITER = 500  # residual evaluations per restart
FIT_TARGET_RESIDUAL = 1e-12  # restarts stop early once a fit is this good
FIT_TOLERANCE = 1e-15  # solver ftol/xtol/gtol, just above machine epsilon
FIT_RESTART_SCALE = 1.0  # noise around the identity gates for restarts after the first
AUTO_FIELD = "auto"
REAL_FIELD = "real"
COMPLEX_FIELD = "complex"
FIT_FIELDS = (AUTO_FIELD, REAL_FIELD, COMPLEX_FIELD)

# Schemes for building plans
ALL_PAIRS = "all-pairs"

# QTF file format
QTF_MAGIC = b"QNTA"
QTF_VERSION = 1
QTF_WIDTH_CODES = {
    0: "<f8",  # 64-bit
    1: "<f4",  # 32-bit
}
QTF_NO_SEED = 0xFFFFFFFFFFFFFFFF

# QTF record kinds
KIND_PLAN = 0
KIND_MATRIX = 1
KIND_LORA = 2

# CLI exit codes
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

# Environment
THREADS_ENV_VAR = "QUANTA_NUM_THREADS"

# Reference model: LLaMA2-7B
# 32 * (4*4096^2 + 3*4096*11008 + 2*4096) + 2*32000*4096 + 4096
LLAMA2_7B_PARAMS = 6_738_415_616
