# Tests for the volsup package
