# Classification-aware super-resolution for SAR ship imagery
