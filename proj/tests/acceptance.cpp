// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
int main() { std::puts("acceptance placeholder"); return 1; }
