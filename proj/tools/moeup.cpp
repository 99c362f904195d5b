// Copyright 2026 The moeup Authors
// SPDX-License-Identifier: Apache-2.0

#include "moeup/cli.hpp"

int main(int argc, char** argv) { return moeup::cli::run(argc, argv); }
