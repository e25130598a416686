"""Message passing over an emulated shared pooled-memory device."""
