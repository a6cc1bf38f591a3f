"""Transient remote-memory market.

Producers harvest idle memory and lease it in slabs through a broker;
consumers use it as an encrypted, integrity-checked KV cache.
"""

from .broker import Assignment, Bill, Broker, BrokerConfig, Queued, Role
from .consumer import (ConsumerProfile, DemandCurve, IntegrityViolation, LeaseExpired,
                       MissRatioCurve, RateLimited, SecureKVClient, SecurityMode, purchase_decision)
from .harvester import Harvester, HarvesterConfig, PerfSample
from .predictor import ArimaForecaster, AvailabilityPredictor
from .pricing import PriceEngine, PricingStrategy, StrategyKind
from .silo import Silo, SiloConfig
from .store import ProducerStore, StoreManager, TokenBucket
from .units import GB, SLAB_SIZE, InvalidArgument, InvalidState, LeaseTerms, PlacementWeights

__version__ = "0.1.0"

__all__ = [
    "Assignment", "Bill", "Broker", "BrokerConfig", "Queued", "Role",
    "ConsumerProfile", "DemandCurve", "IntegrityViolation", "LeaseExpired", "MissRatioCurve",
    "RateLimited", "SecureKVClient", "SecurityMode", "purchase_decision",
    "Harvester", "HarvesterConfig", "PerfSample",
    "ArimaForecaster", "AvailabilityPredictor",
    "PriceEngine", "PricingStrategy", "StrategyKind",
    "Silo", "SiloConfig",
    "ProducerStore", "StoreManager", "TokenBucket",
    "GB", "SLAB_SIZE", "InvalidArgument", "InvalidState", "LeaseTerms", "PlacementWeights",
]
