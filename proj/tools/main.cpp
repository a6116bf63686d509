// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0

#include "rematch/cli.hpp"

int main(int argc, char** argv) { return rematch::cli_main(argc, argv); }
