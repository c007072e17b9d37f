import logging

from .cache import LayerCache as LayerCache
from .config import BudgetConfig as BudgetConfig
from .config import PolicyKind as PolicyKind
from .container import load_cache as load_cache
from .container import save_cache as save_cache
from .policy import EvictionResult as EvictionResult
from .policy import compress_caches as compress_caches

logging.basicConfig(
    format="[%(asctime)s] %(message)s",
    level=logging.INFO,
)
logging.captureWarnings(capture=True)
logger = logging.getLogger(__name__)
