// Copyright (c) 2026 the lrc authors
// SPDX-License-Identifier: Apache-2.0
int main() { return 0; }
