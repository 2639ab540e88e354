//! Holds the `acceptance` test target, which checks the library end to end
//! against its acceptance criteria. There is no library code here.
