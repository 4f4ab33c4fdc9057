#include "slotfill/layers.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace slotfill {

namespace {

Tensor glorot_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::vector<double> v(rows * cols);
  for (double& x : v) x = rng.uniform(-limit, limit);
  return Tensor::from({rows, cols}, std::move(v), true);
}

}  // namespace

EmbeddingTable EmbeddingTable::random_init(std::size_t vocab_size,
                                           std::size_t dim, Rng& rng,
                                           double range, bool trainable) {
  if (vocab_size < 2)
    throw std::invalid_argument(
        "EmbeddingTable: vocab must hold at least the UNK and PAD rows");
  std::vector<double> v(vocab_size * dim);
  for (double& x : v) x = rng.uniform(-range, range);
  EmbeddingTable table;
  table.vocab_size = vocab_size;
  table.dim = dim;
  table.trainable = trainable;
  table.weights = Tensor::from({vocab_size, dim}, std::move(v), trainable);
  return table;
}

Tensor EmbeddingTable::lookup(const std::vector<std::size_t>& ids) const {
  for (std::size_t id : ids)
    if (id >= vocab_size)
      throw std::invalid_argument("EmbeddingTable::lookup: id " +
                                  std::to_string(id) + " out of range (vocab " +
                                  std::to_string(vocab_size) + ")");
  return gather_rows(weights, ids);
}

LstmCell LstmCell::glorot_init(std::size_t input_dim, std::size_t hidden_dim,
                               Rng& rng) {
  LstmCell cell;
  cell.input_dim = input_dim;
  cell.hidden_dim = hidden_dim;
  cell.w_input = glorot_matrix(input_dim, 4 * hidden_dim, rng);
  cell.w_hidden = glorot_matrix(hidden_dim, 4 * hidden_dim, rng);
  std::vector<double> bias(4 * hidden_dim, 0.0);
  for (std::size_t j = hidden_dim; j < 2 * hidden_dim; ++j) bias[j] = 1.0;
  cell.bias = Tensor::from({1, 4 * hidden_dim}, std::move(bias), true);
  return cell;
}

BiLstmEncoder BiLstmEncoder::glorot_init(std::size_t input_dim,
                                         std::size_t hidden_dim, Rng& rng) {
  BiLstmEncoder enc;
  enc.input_dim = input_dim;
  enc.hidden_dim = hidden_dim;
  enc.forward_cell = LstmCell::glorot_init(input_dim, hidden_dim, rng);
  enc.backward_cell = LstmCell::glorot_init(input_dim, hidden_dim, rng);
  return enc;
}

FeedForwardHead FeedForwardHead::glorot_init(std::size_t input_dim,
                                             std::size_t hidden_dim,
                                             std::size_t output_dim, Rng& rng) {
  FeedForwardHead head;
  head.input_dim = input_dim;
  head.hidden_dim = hidden_dim;
  head.output_dim = output_dim;
  head.w1 = glorot_matrix(input_dim, hidden_dim, rng);
  head.b1 = Tensor::zeros({1, hidden_dim}, true);
  head.w2 = glorot_matrix(hidden_dim, output_dim, rng);
  head.b2 = Tensor::zeros({1, output_dim}, true);
  return head;
}

Tensor FeedForwardHead::apply(const Tensor& x) const {
  if (x.rank() != 2 || x.cols() != input_dim)
    throw std::invalid_argument(
        "FeedForwardHead::apply: input is " + shape_to_string(x.shape()) +
        ", head expects m x " + std::to_string(input_dim));
  Tensor hidden = tanh(add_rowvec(matmul(x, w1), b1));
  return add_rowvec(matmul(hidden, w2), b2);
}

std::size_t FeedForwardHead::parameter_count() const {
  return input_dim * hidden_dim + hidden_dim + hidden_dim * output_dim +
         output_dim;
}

Tensor embed_sentence(const std::vector<std::size_t>& word_ids,
                      const std::vector<std::size_t>& pos_ids,
                      const EmbeddingTable& word_table,
                      const EmbeddingTable& pos_table) {
  if (word_ids.empty() || word_ids.size() != pos_ids.size())
    throw std::invalid_argument(
        "embed_sentence: need equal, non-empty word and POS id sequences (" +
        std::to_string(word_ids.size()) + " vs " +
        std::to_string(pos_ids.size()) + ")");
  return concat({word_table.lookup(word_ids), pos_table.lookup(pos_ids)}, 1);
}

namespace {

// One LSTM step; order indices select the timestep for each direction.
Tensor lstm_step(const LstmCell& cell, const Tensor& x_t, Tensor& h_prev,
                 Tensor& c_prev) {
  const std::size_t h = cell.hidden_dim;
  Tensor gates = add_rowvec(
      add(matmul(x_t, cell.w_input), matmul(h_prev, cell.w_hidden)), cell.bias);
  Tensor gate_i = sigmoid(slice(gates, 1, 0, h));
  Tensor gate_f = sigmoid(slice(gates, 1, h, 2 * h));
  Tensor gate_g = tanh(slice(gates, 1, 2 * h, 3 * h));
  Tensor gate_o = sigmoid(slice(gates, 1, 3 * h, 4 * h));
  c_prev = add(mul(gate_f, c_prev), mul(gate_i, gate_g));
  h_prev = mul(gate_o, tanh(c_prev));
  return h_prev;
}

}  // namespace

Tensor encode(const Tensor& embedded, const BiLstmEncoder& encoder) {
  if (embedded.rank() != 2 || embedded.cols() != encoder.input_dim)
    throw std::invalid_argument(
        "encode: input is " + shape_to_string(embedded.shape()) +
        ", encoder expects n x " + std::to_string(encoder.input_dim));
  const std::size_t n = embedded.rows();
  if (n == 0) throw std::invalid_argument("encode: empty sentence");
  const std::size_t h = encoder.hidden_dim;

  std::vector<Tensor> fwd(n), bwd(n);
  {
    Tensor state_h = Tensor::zeros({1, h});
    Tensor state_c = Tensor::zeros({1, h});
    for (std::size_t t = 0; t < n; ++t) {
      Tensor x_t = slice(embedded, 0, t, t + 1);
      fwd[t] = lstm_step(encoder.forward_cell, x_t, state_h, state_c);
    }
  }
  {
    Tensor state_h = Tensor::zeros({1, h});
    Tensor state_c = Tensor::zeros({1, h});
    for (std::size_t t = n; t-- > 0;) {
      Tensor x_t = slice(embedded, 0, t, t + 1);
      bwd[t] = lstm_step(encoder.backward_cell, x_t, state_h, state_c);
    }
  }

  std::vector<Tensor> rows(n);
  for (std::size_t t = 0; t < n; ++t) rows[t] = concat({fwd[t], bwd[t]}, 1);
  return concat(rows, 0);
}

Tensor context_vector(const Tensor& hidden_states, std::size_t i) {
  const std::size_t n = hidden_states.rows();
  const std::size_t width = hidden_states.cols();
  if (i >= n)
    throw std::invalid_argument("context_vector: position " +
                                std::to_string(i) + " out of range for " +
                                std::to_string(n) + " rows");
  if (n == 1) return Tensor::zeros({1, width});  // empty pool convention
  Tensor mask = Tensor::zeros({n, width});
  for (std::size_t j = 0; j < width; ++j) mask.at(i, j) = 1.0;
  Tensor filled = mask_fill(hidden_states, mask,
                            -std::numeric_limits<double>::infinity());
  return max_over_rows(filled);
}

Tensor sentence_vector(const Tensor& hidden_states) {
  if (hidden_states.rank() != 2 || hidden_states.rows() == 0)
    throw std::invalid_argument("sentence_vector: need at least one row");
  return max_over_rows(hidden_states);
}

GloveLoadReport load_glove(
    const std::string& path,
    const std::unordered_map<std::string, std::size_t>& vocab,
    EmbeddingTable& table) {
  std::ifstream in(path);
  if (!in)
    throw std::runtime_error("load_glove: cannot open " + path);
  GloveLoadReport report;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string token;
    fields >> token;
    if (token.empty()) {
      report.malformed.push_back("line " + std::to_string(line_no) +
                                 ": missing token");
      continue;
    }
    std::vector<double> vec;
    vec.reserve(table.dim);
    double x;
    while (fields >> x) vec.push_back(x);
    if (vec.size() != table.dim) {
      report.malformed.push_back("line " + std::to_string(line_no) + ": got " +
                                 std::to_string(vec.size()) +
                                 " values, expected " +
                                 std::to_string(table.dim));
      continue;
    }
    auto it = vocab.find(token);
    if (it == vocab.end()) {
      ++report.skipped;
      continue;
    }
    if (it->second >= table.vocab_size) {
      report.malformed.push_back("line " + std::to_string(line_no) +
                                 ": vocab id out of range");
      continue;
    }
    auto& w = table.weights.values();
    std::copy(vec.begin(), vec.end(), w.begin() + it->second * table.dim);
    ++report.loaded;
  }
  return report;
}

}  // namespace slotfill
