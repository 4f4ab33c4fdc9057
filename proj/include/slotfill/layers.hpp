#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "slotfill/rng.hpp"
#include "slotfill/tensor.hpp"

namespace slotfill {

// Lookup table of row embeddings. Row 0 is reserved for unknown tokens and
// row 1 for padding; both always exist.
struct EmbeddingTable {
  static constexpr std::size_t kUnkIndex = 0;
  static constexpr std::size_t kPadIndex = 1;

  std::size_t vocab_size = 0;
  std::size_t dim = 0;
  Tensor weights;  // vocab_size x dim
  bool trainable = true;

  static EmbeddingTable random_init(std::size_t vocab_size, std::size_t dim,
                                    Rng& rng, double range = 0.1,
                                    bool trainable = true);

  Tensor lookup(const std::vector<std::size_t>& ids) const;
};

// One direction of the encoder. Gate order in the packed matrices is
// [input, forget, cell, output].
struct LstmCell {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  Tensor w_input;   // input_dim x 4h
  Tensor w_hidden;  // hidden_dim x 4h
  Tensor bias;      // 1 x 4h, forget slice initialised to 1

  static LstmCell glorot_init(std::size_t input_dim, std::size_t hidden_dim,
                              Rng& rng);
};

struct BiLstmEncoder {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;  // per direction; output width is 2*hidden_dim
  LstmCell forward_cell;
  LstmCell backward_cell;

  static BiLstmEncoder glorot_init(std::size_t input_dim,
                                   std::size_t hidden_dim, Rng& rng);
  std::size_t output_dim() const { return 2 * hidden_dim; }
};

// Exactly two affine layers with tanh between them.
struct FeedForwardHead {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t output_dim = 0;
  Tensor w1;  // input_dim x hidden_dim
  Tensor b1;  // 1 x hidden_dim
  Tensor w2;  // hidden_dim x output_dim
  Tensor b2;  // 1 x output_dim

  static FeedForwardHead glorot_init(std::size_t input_dim,
                                     std::size_t hidden_dim,
                                     std::size_t output_dim, Rng& rng);

  Tensor apply(const Tensor& x) const;  // m x input_dim -> m x output_dim
  std::size_t parameter_count() const;
};

// Word and POS embedding rows concatenated per token: n x (d_w + d_p).
Tensor embed_sentence(const std::vector<std::size_t>& word_ids,
                      const std::vector<std::size_t>& pos_ids,
                      const EmbeddingTable& word_table,
                      const EmbeddingTable& pos_table);

// BiLSTM over an embedded sentence: n x input_dim -> n x 2h. Row i is the
// forward state after prefix <= i next to the backward state after suffix >= i.
Tensor encode(const Tensor& embedded, const BiLstmEncoder& encoder);

// Elementwise max over all rows of H except row i. A one-row H has an empty
// pool and yields the zero vector.
Tensor context_vector(const Tensor& hidden_states, std::size_t i);

// Elementwise max over all rows of H.
Tensor sentence_vector(const Tensor& hidden_states);

struct GloveLoadReport {
  std::size_t loaded = 0;       // vocabulary rows initialised from the file
  std::size_t skipped = 0;      // well-formed lines outside the vocabulary
  std::vector<std::string> malformed;  // "line N: reason" entries
};

// Reads word vectors in GloVe text format (token then exactly `dim` decimal
// floats per line) into the matching rows of `table`. Tokens absent from
// `vocab` are skipped.
GloveLoadReport load_glove(const std::string& path,
                           const std::unordered_map<std::string, std::size_t>& vocab,
                           EmbeddingTable& table);

}  // namespace slotfill
