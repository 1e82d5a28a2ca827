"""Defaults and fixed tables for the view-set model"""

# === MODEL DEFAULTS ===
VIEW_DIM = 512
NUM_BLOCKS = 4
NUM_HEADS = 8
MLP_RATIO = 2
DROPOUT_RATE = 0.1
DESCRIPTOR_DIM = 1024
DECODER_HIDDEN = [512]
LABEL_SMOOTHING = 0.1
LAYER_NORM_EPS = 1e-5
MAX_VIEWS = 20

# === INITIALIZER ===
VIEW_SIZE = (224, 224, 3)  # height, width, channels
BATCH_NORM_MOMENTUM = 0.1
BATCH_NORM_EPS = 1e-5

# Each entry: (in_channels, out_channels, kernel, stride, padding); every conv
# is followed by batch-norm + ReLU, the first one also by max-pool.
SHALLOW_CONV_LAYERS = {
    "shallow_conv_1": [(3, 64, 7, 2, 3)],
    "shallow_conv_2": [(3, 64, 7, 2, 3), (64, 32, 3, 2, 1)],
}
SHALLOW_CONV_POOL = (3, 2, 1)  # kernel, stride, padding

# === TRAINING ===
STAGE1_EPOCHS = 30
STAGE1_LR = 0.01
STAGE1_MOMENTUM = 0.9
PEAK_LR = 1e-3
INTERVAL_EPOCHS = 100
WARMUP_EPOCHS = 5
PEAK_DECAY = 0.4
TOTAL_EPOCHS = 300
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.05

# === RETRIEVAL ===
RANK_LIST_LENGTH = 1000
GAIN_SUBCATEGORY = 2.0
GAIN_CATEGORY = 1.0

# === RANDOMNESS ===
# Sub-stream ids; the order is part of the reproducibility contract.
RANDOM_STREAMS = {
    "data": 0,
    "init": 1,
    "dropout": 2,
    "permutation": 3,
    "subset": 4,
    "split": 5,
    "gradcheck": 6,
}

# === FILE FORMATS ===
CHECKPOINT_MAGIC = b"VSFORMER-CKPT 1\n"
SCHEDULE_FLOAT_FORMAT = "{:.10e}"

# === CLI ===
ABLATION_AXES = [
    "blocks",
    "heads",
    "mlp-ratio",
    "dim",
    "pos-enc",
    "cls-token",
    "transition",
    "decoder",
    "views",
    "initializer",
    "optimizer",
    "stages",
]

# === RUN DIRECTORY LAYOUT ===
DATASET_FILE = "dataset.txt"
SPLIT_FILE = "split.txt"
STAGE1_CHECKPOINT = "stage1.ckpt"
MODEL_CHECKPOINT = "model.ckpt"
TRAIN_LOG = "train_log.csv"
RUN_CONFIG_FILE = "config.txt"
ATTENTION_FILE = "attention_block{block}.csv"
