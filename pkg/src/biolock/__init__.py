"""Multimodal biometric matching: fingerprints and irises, fused decisions.

Modules:
    imaging      -- PGM I/O and shared raster primitives
    fingerprint  -- minutiae extraction, registration, matching
    iris         -- localization, polar normalization, two code schemes
    fusion       -- score normalization and the sum-rule fusion pipeline
    registry     -- template database, verify/identify/access, audit log
    cli          -- the ``biolock`` command-line front end
"""

__version__ = "0.1.0"
