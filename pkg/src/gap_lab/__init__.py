"""Desk-scale laboratory for the Google/Apple exposure-notification protocol.

Subpackages cover the key schedule (crypto), the BLE link model (ble),
capture logs (captures), the scenario simulator (simulate), the diagnosis
key server (keyserver), client-side matching (matcher), attacker analytics
(profiler), the relay attack (wormhole), and feasibility arithmetic
(feasibility). The ``gap-lab`` CLI exposes every workflow.
"""

from .crypto import (
    INTERVAL_SECONDS,
    INTERVALS_PER_DAY,
    TemporaryExposureKey,
    derive_aemk,
    derive_rpi,
    derive_rpik,
    decrypt_aem,
    encrypt_aem,
    expand_tek,
    generate_tek,
    interval_number,
)

__all__ = [
    "INTERVAL_SECONDS",
    "INTERVALS_PER_DAY",
    "TemporaryExposureKey",
    "derive_aemk",
    "derive_rpi",
    "derive_rpik",
    "decrypt_aem",
    "encrypt_aem",
    "expand_tek",
    "generate_tek",
    "interval_number",
]

__version__ = "0.1.0"
