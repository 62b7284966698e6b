// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#include "bglab/policy.hpp"

#include <vector>

namespace bglab {

namespace {

template <class T>
class ModelSession final : public PolicySession {
 public:
  ModelSession(const Model<T>& model, int rows)
      : base_(InferenceCache<T>::empty(model.config)),
        decoder_(model, {&base_}, std::vector<int>(rows, 0), model.config.max_positions) {
    const std::vector<Token> bos(rows, kBos);
    update(decoder_.step(bos));
  }

  const Eigen::MatrixXd& distributions() const override { return probs_; }

  void push(std::span<const Token> tokens) override { update(decoder_.step(tokens)); }

 private:
  void update(const RowMat<T>& logits) {
    probs_ = logits.template cast<double>();
    for (Eigen::Index r = 0; r < probs_.rows(); ++r) {
      const double mx = probs_.row(r).maxCoeff();
      probs_.row(r) = (probs_.row(r).array() - mx).exp();
      probs_.row(r) /= probs_.row(r).sum();
    }
  }

  InferenceCache<T> base_;
  BatchDecoder<T> decoder_;
  Eigen::MatrixXd probs_;
};

class TeacherSession final : public PolicySession {
 public:
  TeacherSession(const OracleSpec& spec, int rows) : spec_(spec), probs_(rows, kVocabSize) { update(); }

  const Eigen::MatrixXd& distributions() const override { return probs_; }

  void push(std::span<const Token> tokens) override {
    if (static_cast<Eigen::Index>(tokens.size()) != probs_.rows()) throw UsageError("one token per row expected");
    ++position_;
    update();
  }

 private:
  void update() {
    if (position_ >= spec_.template_length()) {
      // Past the template: EOS forever, so sessions may run one step long.
      probs_.setZero();
      probs_.col(kEos).setOnes();
      return;
    }
    const Distribution d = teacher_distribution(spec_, position_);
    for (Eigen::Index r = 0; r < probs_.rows(); ++r) {
      for (int a = 0; a < kVocabSize; ++a) probs_(r, a) = d[a];
    }
  }

  const OracleSpec& spec_;
  Eigen::MatrixXd probs_;
  int position_ = 0;
};

}  // namespace

template <class T>
std::unique_ptr<PolicySession> ModelPolicy<T>::open(int rows) const {
  return std::make_unique<ModelSession<T>>(model_, rows);
}

std::unique_ptr<PolicySession> TeacherPolicy::open(int rows) const {
  return std::make_unique<TeacherSession>(spec_, rows);
}

template class ModelPolicy<float>;
template class ModelPolicy<double>;

}  // namespace bglab
