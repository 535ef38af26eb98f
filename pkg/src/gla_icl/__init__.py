"""In-context regression under drifting tasks with gated linear attention."""
