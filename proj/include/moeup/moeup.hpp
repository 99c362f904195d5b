// Copyright 2026 The moeup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "moeup/accounting.hpp"
#include "moeup/analysis.hpp"
#include "moeup/checkpoint.hpp"
#include "moeup/config.hpp"
#include "moeup/corpus.hpp"
#include "moeup/error.hpp"
#include "moeup/model.hpp"
#include "moeup/numerics.hpp"
#include "moeup/parallel.hpp"
#include "moeup/routing_trace.hpp"
#include "moeup/toy_lm.hpp"
#include "moeup/trainer.hpp"
#include "moeup/upcycle.hpp"
