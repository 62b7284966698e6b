// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>
#include <memory>
#include <span>

#include "bglab/model.hpp"
#include "bglab/oracle.hpp"

namespace bglab {

// Lock-step next-token distributions for a batch of rows. A fresh session
// sits right after BOS.
class PolicySession {
 public:
  virtual ~PolicySession() = default;
  // rows x vocab distributions at the current position.
  virtual const Eigen::MatrixXd& distributions() const = 0;
  // Appends one token per row and advances the position.
  virtual void push(std::span<const Token> tokens) = 0;
};

class Policy {
 public:
  virtual ~Policy() = default;
  virtual std::unique_ptr<PolicySession> open(int rows) const = 0;
};

// A student network in eval mode.
template <class T>
class ModelPolicy final : public Policy {
 public:
  explicit ModelPolicy(const Model<T>& model) : model_(model) {}
  std::unique_ptr<PolicySession> open(int rows) const override;

 private:
  const Model<T>& model_;
};

// The oracle itself: ignores the prefix and returns the scheduled
// distribution for the current position.
class TeacherPolicy final : public Policy {
 public:
  explicit TeacherPolicy(const OracleSpec& spec) : spec_(spec) {}
  std::unique_ptr<PolicySession> open(int rows) const override;

 private:
  const OracleSpec& spec_;
};

}  // namespace bglab
