//! Holds the `acceptance` test target, which runs after the library suites.
