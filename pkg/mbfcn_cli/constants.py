"""Constants and default configuration for mbfcn-cli."""

import math

# Application info
APP_NAME = "mbfcn-cli"
APP_VERSION = "0.3.0"

# Backbone stages and their output strides (after the 32 -> 16 reduction)
STAGES = ("C2", "C3", "C4", "C5")
STAGE_STRIDES = {"C2": 4, "C3": 8, "C4": 16, "C5": 16}
SUPPORTED_TARGET_STRIDES = (4, 8, 16, 32)
DEFAULT_STAGE_WIDTHS = (16, 32, 64, 64)
DEFAULT_CONVS_PER_STAGE = 2
DEFAULT_KERNEL_SIZE = 3
C5_DILATION = 2

# Branch heads
DEFAULT_HEAD_DIM = 64
DEFAULT_ANCHOR_RATIOS = (1.0,)
DEFAULT_ANCHOR_SIZES = {
    4: (8.0, 12.0, 16.0),
    8: (12.0, 16.0, 24.0, 32.0, 48.0),
    16: (64.0, 96.0, 128.0, 192.0),
    32: (128.0, 192.0, 256.0),
}
# C345(8)-C45(16)
DEFAULT_BRANCHES = (
    (("C3", "C4", "C5"), 8),
    (("C4", "C5"), 16),
)

# Initialization: head layers N(0, 0.01^2), backbone convs He-normal
INIT_WEIGHT_STD = 0.01
INIT_BIAS = 0.1
BACKBONE_INIT_GAIN = 2.0

# Input normalization of [0, 1] pixels
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25

# Training
DEFAULT_BASE_LR = 0.001
DEFAULT_LR_DECAY_EVERY = 30000
DEFAULT_LR_DECAY_FACTOR = 0.1
DEFAULT_MAX_ITERS = 5000
DEFAULT_MOMENTUM = 0.9
DEFAULT_WEIGHT_DECAY = 0.0005
DEFAULT_BATCH_PER_BRANCH = 128
DEFAULT_POS_IOU = 0.55
DEFAULT_NEG_IOU = 0.35
DEFAULT_FLIP_PROB = 0.5
DEFAULT_MAX_SIDE = 256
DEFAULT_LAMBDA = 2.0
DEFAULT_GAMMA = 1.0
DEFAULT_SEED = 0
DEFAULT_LOG_EVERY = 100
DEFAULT_CHECKPOINT_EVERY = 1000
POSITIVE_FRACTION = 0.25
PAD_MULTIPLE = 16
PROB_CLAMP = 1e-7

# Sub-seed offsets derived from the global seed
SEED_OFFSET_INIT = 0
SEED_OFFSET_SAMPLING = 1
SEED_OFFSET_FLIP = 2
SEED_OFFSET_OHEM = 3

# Box regression
DELTA_CLAMP = math.log(1000.0)

# Inference
DEFAULT_SCORE_THRESH = 0.05
DEFAULT_NMS_THRESH = 0.3

# Evaluation
EVAL_IOU = 0.5
SUBSET_MIN_HEIGHT = {
    "easy": 50.0,
    "medium": 30.0,
    "hard": 10.0,
    "all": 0.0,
}

# Synthetic data
DEFAULT_IMAGE_SIZE = 128
DEFAULT_FACES_PER_IMAGE = (1, 6)
DEFAULT_FACE_SIZE_RANGE = (10.0, 96.0)
DEFAULT_CLUTTER_COUNT = (2, 8)
MAX_PLACEMENT_ATTEMPTS = 100
MAX_PAIRWISE_IOU = 0.3
ANNOTATION_FILE = "annotations.txt"
MANIFEST_FILE = "manifest.yaml"
IMAGES_DIR = "images"
IMAGE_SUFFIXES = (".ppm", ".pgm")

# Ablation
HOLDOUT_FRACTION = 1.0 / 6.0

# Checkpoints
CHECKPOINT_MAGIC = b"MBFC"
CHECKPOINT_VERSION = 1

# Gradient checking
GRADCHECK_EPS = 1e-4
GRADCHECK_TOLERANCE = 1e-5
GRADCHECK_LOSS_TOLERANCE = 1e-4
GRADCHECK_INSTANCES = 100
