def pytest_collection_modifyitems(items):
    # Property-based tests form the invariants suite; anything driven by
    # hypothesis gets the marker without per-test bookkeeping.
    for item in items:
        if hasattr(item.obj, "hypothesis"):
            item.add_marker("invariants")
