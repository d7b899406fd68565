//! Acceptance criteria for `gamblet-core`, run as the `acceptance` test target.
