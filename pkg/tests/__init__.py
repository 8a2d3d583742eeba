# Tests