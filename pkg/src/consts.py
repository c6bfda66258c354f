import os
from pathlib import Path

ROOT_DIR = Path(__file__).parent.parent
DATA_DIR = ROOT_DIR / "data"
GENERATED_DIR = ROOT_DIR / "generated"
DEMO_TEMPLATE = DATA_DIR / "demo_head.obj"
DEMO_SKELETON = DATA_DIR / "asm_skeleton.json"
DEMO_ANNOTATIONS = DATA_DIR / "demo_head_annotations.json"
DATABASE_URL = os.environ.get("ASM_DATABASE_URL", "sqlite:///asm_runs.sqlite")
LOG_LEVEL = os.environ.get("ASM_LOG_LEVEL", "INFO")
DEFAULT_THREADS = int(os.environ.get("ASM_THREADS", os.cpu_count() or 1))

BONE_COUNT = 84
DEFAULT_K = 2
TAU_DIM = 9
COVERAGE_EPS = 1e-8
DEFAULT_SIGMA = 0.1

# registration (scan fitting)
REG_LAMBDAS = (1.0, 0.1, 0.1, 0.1, 0.1)
REG_LR = 1e-3
REG_ITERATIONS = 300
CROP_RADIUS = 95.0

# multi-view reconstruction
MV_LAMBDAS = (0.001, 0.4, 100.0, 1.0)
MV_LR = 1e-4
MV_ITERATIONS = 500
THETA_DEG = 10.0
UV_RESOLUTION = 256
PATCH_SIZE = 3

PARAMS_MAGIC = b"ASMP"
PARAMS_VERSION = 1

KEYPOINT_LABELS = (
    "right_eye_outer",
    "right_eye_inner",
    "left_eye_inner",
    "left_eye_outer",
    "nose_tip",
    "right_mouth_corner",
    "left_mouth_corner",
)
NOSE_TIP_INDEX = KEYPOINT_LABELS.index("nose_tip")
LANDMARK_COUNT = 68

DATA_DIR.mkdir(parents=True, exist_ok=True)
GENERATED_DIR.mkdir(parents=True, exist_ok=True)
