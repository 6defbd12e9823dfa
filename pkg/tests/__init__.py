# Test suite for npr-operator
