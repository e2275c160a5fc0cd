# config.py
import dataclasses
import os
from dataclasses import dataclass, fields
from typing import Dict, Tuple

from coactseg.utils import ConfigError, derive_seed

# Project paths
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA_DIR = os.path.join(PROJECT_ROOT, 'data')

# Results database
DATABASE_PATH = os.path.join(DATA_DIR, 'coactseg.db')
LOG_FILENAME = 'coactseg.log'

# Ensure the data directory exists
os.makedirs(DATA_DIR, exist_ok=True)

# Worker parallelism cap (BLAS threads, ablation processes)
THREADS = max(1, int(os.environ.get('COACTSEG_THREADS', '1') or 1))

# Root seed ("Random Seed: 1337")
DEFAULT_SEED = 1337

# Phantom defaults
PHANTOM_DIMS = (24, 24, 24)
PHANTOM_SPACING_MM = (1.0, 1.0, 1.0)
BACKGROUND_LEVEL = 100.0
TEXTURE_STD = 4.0
NOISE_STD = 2.0
LESION_CONTRAST = 40.0
LESION_COUNT_RANGE = (2, 3)
LESION_RADIUS_RANGE_VOX = (1, 3)
NEW_LESION_COUNT_RANGE = (1, 2)

# Network defaults (desk scale)
NETWORK_LEVELS = 3
BASE_CHANNELS = 4
HEAD_CHANNELS = 4
PRELU_SLOPE_INIT = 0.25

# Training defaults (full-scale runs use patch 80, margin 10, batch 4+4, 20k/10k iterations)
PATCH_SIZE = 24
SHIFT_MARGIN = 3
BATCH_SINGLE = 2
BATCH_TWO = 2
ITERATIONS = 2000
SWITCH_ITERATION = 1000
LEARNING_RATE = 1e-2
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LAMBDA1 = 1.0
LAMBDA2 = 1.0
DICE_SMOOTH = 1e-5
LOG_EVERY = 10
CHECKPOINT_EVERY = 500

# Inference / evaluation
THRESHOLD = 0.5
MIN_LESION_SIZE = 11

# Verification
GRADCHECK_EPS = 1e-4
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_SHRINK_STEPS = 2


def _format(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ','.join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, kind, key: str):
    text = text.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind == Tuple[int, ...]:
            return tuple(int(v) for v in text.split(',') if v.strip())
        if kind == Tuple[float, ...]:
            return tuple(float(v) for v in text.split(',') if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {text!r}") from None


def _key(default, help_text):
    return dataclasses.field(default=default, metadata={'help': help_text})


@dataclass(frozen=True)
class RunConfig:
    """Flat key=value configuration shared by every subcommand."""

    # paths
    workdir: str = _key('runs/default', 'root directory of every artifact of a run')
    manifest: str = _key('', 'manifest path (default: <workdir>/data/manifest.tsv)')
    checkpoint: str = _key('', 'checkpoint to load (default: <workdir>/train/model_final.ckpt)')
    database: str = _key('', f'results database (default: {DATABASE_PATH})')
    seed: int = _key(DEFAULT_SEED, 'root seed every other seed derives from')
    # phantom
    dims: Tuple[int, ...] = _key(PHANTOM_DIMS, 'phantom volume dims D,H,W')
    spacing_mm: Tuple[float, ...] = _key(PHANTOM_SPACING_MM, 'phantom voxel spacing in mm')
    background_level: float = _key(BACKGROUND_LEVEL, 'mean brain intensity')
    texture_std: float = _key(TEXTURE_STD, 'amplitude of the smooth background texture')
    noise_std: float = _key(NOISE_STD, 'std of the per-scan Gaussian noise')
    lesion_contrast: float = _key(LESION_CONTRAST, 'lesion hyperintensity above background')
    lesion_count_range: Tuple[int, ...] = _key(LESION_COUNT_RANGE, 'lesions per scan (min,max)')
    lesion_radius_range_vox: Tuple[int, ...] = _key(LESION_RADIUS_RANGE_VOX, 'lesion radii in voxels (min,max)')
    new_lesion_count_range: Tuple[int, ...] = _key(NEW_LESION_COUNT_RANGE, 'new lesions per follow-up (min,max)')
    n_train_single: int = _key(2, 'single-time-point training samples to generate')
    n_train_two: int = _key(2, 'two-time-point training samples to generate')
    n_val_single: int = _key(2, 'single-time-point validation samples to generate')
    n_val_two: int = _key(2, 'two-time-point validation samples to generate')
    # network
    levels: int = _key(NETWORK_LEVELS, 'encoder/decoder resolution levels')
    base_channels: int = _key(BASE_CHANNELS, 'channels at full resolution')
    head_channels: int = _key(HEAD_CHANNELS, 'hidden channels of each prediction head')
    prelu_slope_init: float = _key(PRELU_SLOPE_INIT, 'initial PReLU slope')
    # training
    iterations: int = _key(ITERATIONS, 'optimizer steps')
    lr: float = _key(LEARNING_RATE, 'Adam learning rate')
    adam_beta1: float = _key(ADAM_BETA1, 'Adam beta1')
    adam_beta2: float = _key(ADAM_BETA2, 'Adam beta2')
    adam_eps: float = _key(ADAM_EPS, 'Adam epsilon')
    n_single: int = _key(BATCH_SINGLE, 'single-time-point patches per batch')
    n_two: int = _key(BATCH_TWO, 'two-time-point patches per batch')
    patch_size: int = _key(PATCH_SIZE, 'cubic patch edge in voxels')
    shift_margin: int = _key(SHIFT_MARGIN, 'maximum patch-centre shift in voxels')
    lambda1: float = _key(LAMBDA1, 'weight of the new-lesion loss')
    lambda2: float = _key(LAMBDA2, 'weight of the relation regularizer once active')
    switch_iteration: int = _key(SWITCH_ITERATION, 'first iteration with the regularizer active')
    staged: bool = _key(False, 'switch the regularizer on at iterations/2 (overrides switch_iteration)')
    log_every: int = _key(LOG_EVERY, 'iterations between training log records')
    checkpoint_every: int = _key(CHECKPOINT_EVERY, 'iterations between checkpoints')
    # inference and metrics
    stride: int = _key(0, 'sliding-window stride (0: patch_size/4)')
    threshold: float = _key(THRESHOLD, 'binarization threshold')
    min_lesion_size: int = _key(MIN_LESION_SIZE, 'lesions smaller than this are ignored by F1')
    distances_in_mm: bool = _key(False, 'report surface distances in mm instead of voxels')
    # verification
    gradcheck_size: int = _key(8, 'patch edge of the gradient check')
    gradcheck_eps: float = _key(GRADCHECK_EPS, 'finite-difference step')
    gradcheck_tolerance: float = _key(GRADCHECK_TOLERANCE, 'maximum accepted relative error')
    gradcheck_coords: int = _key(6, 'coordinates checked per parameter tensor')
    # ablation
    ablation_seeds: Tuple[int, ...] = _key((1337, 1338, 1339), 'seeds averaged by the ablation grid')

    @classmethod
    def keys(cls) -> Dict[str, str]:
        """Every accepted key with its help text."""
        return {f.name: f.metadata['help'] for f in fields(cls)}

    @classmethod
    def load(cls, path: str) -> 'RunConfig':
        """Parse a key = value file; blank lines and # comments are ignored."""
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        values = {}
        with open(path, 'r', encoding='utf-8') as handle:
            for number, line in enumerate(handle, start=1):
                line = line.split('#', 1)[0].strip()
                if not line:
                    continue
                if '=' not in line:
                    raise ConfigError(f"{path}:{number}: expected key = value")
                key, value = (part.strip() for part in line.split('=', 1))
                values[key] = value
        return cls().with_overrides(values)

    def with_overrides(self, overrides: Dict[str, object]) -> 'RunConfig':
        """Return a copy with the given keys replaced; string values are parsed."""
        types = {f.name: f.type for f in fields(self)}
        updates = {}
        for key, value in overrides.items():
            if key not in types:
                raise ConfigError(f"unknown config key: {key}")
            updates[key] = _parse(value, types[key], key) if isinstance(value, str) else value
        config = dataclasses.replace(self, **updates)
        config.validate()
        return config

    def dump(self) -> str:
        return ''.join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def save(self, path: str) -> None:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as handle:
            handle.write(self.dump())

    def validate(self) -> None:
        if len(self.dims) != 3 or len(self.spacing_mm) != 3:
            raise ConfigError("dims and spacing_mm need three entries")
        for name in ('lesion_count_range', 'lesion_radius_range_vox', 'new_lesion_count_range'):
            if len(getattr(self, name)) != 2:
                raise ConfigError(f"{name} needs two entries")
        if not self.ablation_seeds:
            raise ConfigError("ablation_seeds needs at least one seed")

    # paths ----------------------------------------------------------------

    @property
    def manifest_path(self) -> str:
        return self.manifest or os.path.join(self.workdir, 'data', 'manifest.tsv')

    @property
    def train_dir(self) -> str:
        return os.path.join(self.workdir, 'train')

    @property
    def checkpoint_path(self) -> str:
        return self.checkpoint or os.path.join(self.train_dir, 'model_final.ckpt')

    @property
    def predict_dir(self) -> str:
        return os.path.join(self.workdir, 'predictions')

    @property
    def report_dir(self) -> str:
        return os.path.join(self.workdir, 'report')

    @property
    def database_path(self) -> str:
        return self.database or DATABASE_PATH

    # module configs -------------------------------------------------------

    def phantom_config(self):
        from coactseg.phantom import PhantomConfig
        return PhantomConfig(
            dims=tuple(self.dims),
            spacing_mm=tuple(self.spacing_mm),
            background_level=self.background_level,
            texture_std=self.texture_std,
            noise_std=self.noise_std,
            lesion_count_range=tuple(self.lesion_count_range),
            lesion_radius_range_vox=tuple(self.lesion_radius_range_vox),
            new_lesion_count_range=tuple(self.new_lesion_count_range),
            lesion_contrast=self.lesion_contrast,
            seed=derive_seed(self.seed, 1),
        )

    def network_config(self, seed=None):
        from coactseg.network import SegNetConfig
        root = self.seed if seed is None else seed
        return SegNetConfig(
            levels=self.levels,
            base_channels=self.base_channels,
            head_channels=self.head_channels,
            prelu_slope_init=self.prelu_slope_init,
            param_seed=derive_seed(root, 2),
        )

    def train_config(self, seed=None):
        from coactseg.losses import LossWeights
        from coactseg.trainer import TrainConfig
        root = self.seed if seed is None else seed
        switch = self.iterations // 2 if self.staged else self.switch_iteration
        return TrainConfig(
            iterations=self.iterations,
            lr=self.lr,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            n_single=self.n_single,
            n_two=self.n_two,
            patch_size=self.patch_size,
            shift_margin=self.shift_margin,
            weights=LossWeights(self.lambda1, self.lambda2, switch),
            seed=root,
            log_every=self.log_every,
            checkpoint_every=self.checkpoint_every,
            network=self.network_config(root),
        )

    def inference_config(self):
        from coactseg.inference import InferenceConfig
        return InferenceConfig(
            patch_size=self.patch_size,
            stride=self.stride or max(1, self.patch_size // 4),
            threshold=self.threshold,
        )

    def metric_options(self):
        from coactseg.metrics import MetricOptions
        return MetricOptions(min_lesion_size=self.min_lesion_size, use_mm=self.distances_in_mm)
