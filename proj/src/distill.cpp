#include "lstsd/distill.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <stdexcept>

namespace lstsd {

TeacherStore::TeacherStore(int n, int c) : n_(n), c_(c) {
  if (n < 1 || c < 2)
    throw std::invalid_argument("TeacherStore: need n >= 1 samples and c >= 2 classes, got n=" +
                                std::to_string(n) + " c=" + std::to_string(c));
  long_logits_.assign(static_cast<std::size_t>(n) * c, 0.0);
  short_logits_.assign(static_cast<std::size_t>(n) * c, 0.0);
  long_valid_.assign(n, 0);
  short_valid_.assign(n, 0);
}

void TeacherStore::check_batch(const std::vector<int>& ids, const Tensor& logits,
                               const char* who) const {
  if (ids.empty()) throw std::invalid_argument(std::string(who) + ": empty id batch");
  if (logits.rank() != 2 || logits.shape[0] != ids.size() ||
      logits.shape[1] != static_cast<std::size_t>(c_))
    throw std::invalid_argument(std::string(who) + ": logits must be [" +
                                std::to_string(ids.size()) + ", " + std::to_string(c_) +
                                "], got " + shape_str(logits.shape));
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= n_)
      throw std::out_of_range(std::string(who) + ": sample id " + std::to_string(ids[r]) +
                              " out of range [0, " + std::to_string(n_) + ")");
    for (std::size_t s = r + 1; s < ids.size(); ++s)
      if (ids[r] == ids[s])
        throw std::invalid_argument(std::string(who) + ": duplicate sample id " +
                                    std::to_string(ids[r]) + " within one batch");
  }
}

void TeacherStore::write_rows(const std::vector<int>& ids, const Tensor& logits,
                              std::vector<double>& dst, std::vector<std::uint8_t>& valid) {
  for (std::size_t r = 0; r < ids.size(); ++r) {
    std::copy_n(logits.data.begin() + r * c_, c_,
                dst.begin() + static_cast<std::size_t>(ids[r]) * c_);
    valid[ids[r]] = 1;
  }
}

void TeacherStore::record_short(const std::vector<int>& ids, const Tensor& logits) {
  check_batch(ids, logits, "TeacherStore::record_short");
  write_rows(ids, logits, short_logits_, short_valid_);
}

void TeacherStore::record_long(const std::vector<int>& ids, const Tensor& logits) {
  check_batch(ids, logits, "TeacherStore::record_long");
  if (!long_writes_allowed_)
    throw std::logic_error(
        "TeacherStore::record_long: long-teacher rows may only be written during the final "
        "epoch of a mini-generation");
  write_rows(ids, logits, long_logits_, long_valid_);
}

bool TeacherStore::short_valid(int id) const {
  if (id < 0 || id >= n_)
    throw std::out_of_range("TeacherStore::short_valid: sample id " + std::to_string(id) +
                            " out of range [0, " + std::to_string(n_) + ")");
  return short_valid_[id] != 0;
}

bool TeacherStore::long_valid(int id) const {
  if (id < 0 || id >= n_)
    throw std::out_of_range("TeacherStore::long_valid: sample id " + std::to_string(id) +
                            " out of range [0, " + std::to_string(n_) + ")");
  return long_valid_[id] != 0;
}

namespace {

Tensor gather_rows(const std::vector<double>& src, int n, int c, const std::vector<int>& ids,
                   const char* who) {
  Tensor out = Tensor::zeros({ids.size(), static_cast<std::size_t>(c)});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= n)
      throw std::out_of_range(std::string(who) + ": sample id " + std::to_string(ids[r]) +
                              " out of range [0, " + std::to_string(n) + ")");
    std::copy_n(src.begin() + static_cast<std::size_t>(ids[r]) * c, c,
                out.data.begin() + r * c);
  }
  return out;
}

}  // namespace

Tensor TeacherStore::short_rows(const std::vector<int>& ids) const {
  return gather_rows(short_logits_, n_, c_, ids, "TeacherStore::short_rows");
}

Tensor TeacherStore::long_rows(const std::vector<int>& ids) const {
  return gather_rows(long_logits_, n_, c_, ids, "TeacherStore::long_rows");
}

namespace {

void write_le_double(std::ostream& os, double v) {
  const std::uint64_t u = std::bit_cast<std::uint64_t>(v);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((u >> (8 * i)) & 0xff);
  os.write(b, 8);
}

double read_le_double(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(u);
}

}  // namespace

void dump_teacher_store(const TeacherStore& store, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("dump_teacher_store: cannot open " + path + " for writing");
  os << store.n() << ' ' << store.c() << '\n';
  os.write(reinterpret_cast<const char*>(store.long_flags().data()), store.n());
  os.write(reinterpret_cast<const char*>(store.short_flags().data()), store.n());
  for (double v : store.long_data()) write_le_double(os, v);
  for (double v : store.short_data()) write_le_double(os, v);
  if (!os) throw std::runtime_error("dump_teacher_store: write failed for " + path);
}

TeacherStore load_teacherstore_impl(std::ifstream& is, const std::string& path) {
  int n = 0, c = 0;
  is >> n >> c;
  if (!is || n < 1 || c < 2)
    throw std::runtime_error("load_teacher_store: malformed header in " + path);
  if (is.get() != '\n')
    throw std::runtime_error("load_teacher_store: header of " + path +
                             " is not newline-terminated");
  TeacherStore store(n, c);
  std::vector<std::uint8_t> lv(n), sv(n);
  is.read(reinterpret_cast<char*>(lv.data()), n);
  is.read(reinterpret_cast<char*>(sv.data()), n);
  std::vector<double> ll(static_cast<std::size_t>(n) * c), sl(static_cast<std::size_t>(n) * c);
  for (double& v : ll) v = read_le_double(is);
  for (double& v : sl) v = read_le_double(is);
  if (!is) throw std::runtime_error("load_teacher_store: " + path + " ended early");
  is.peek();
  if (!is.eof()) throw std::runtime_error("load_teacher_store: trailing bytes in " + path);
  // Rebuild through the public writers, one row at a time.
  store.allow_long_writes(true);
  for (int id = 0; id < n; ++id) {
    Tensor row = Tensor::zeros({1, static_cast<std::size_t>(c)});
    if (sv[id]) {
      std::copy_n(sl.begin() + static_cast<std::size_t>(id) * c, c, row.data.begin());
      store.record_short({id}, row);
    }
    if (lv[id]) {
      std::copy_n(ll.begin() + static_cast<std::size_t>(id) * c, c, row.data.begin());
      store.record_long({id}, row);
    }
  }
  store.allow_long_writes(false);
  return store;
}

TeacherStore load_teacher_store(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_teacher_store: cannot open " + path);
  return load_teacherstore_impl(is, path);
}

double compose_total(double ce, double kl_long, double kl_short, double lambda_long,
                     double lambda_short) {
  return ce + (lambda_long * kl_long + lambda_short * kl_short);
}

AssembledLoss assemble_loss(Tape& tape, const Tensor& student_logits,
                            const std::vector<int>& labels, const TeacherStore& store,
                            const std::vector<int>& ids, double lambda_long,
                            double lambda_short, double temperature, int mini_gen_index,
                            bool reverse_kl) {
  if (mini_gen_index < 1)
    throw std::invalid_argument("assemble_loss: mini_gen_index must be >= 1, got " +
                                std::to_string(mini_gen_index));
  if (lambda_long < 0.0 || lambda_short < 0.0)
    throw std::invalid_argument("assemble_loss: teacher weights must be >= 0");
  if (ids.size() != student_logits.shape[0])
    throw std::invalid_argument("assemble_loss: " + std::to_string(ids.size()) +
                                " ids for " + std::to_string(student_logits.shape[0]) +
                                " logit rows");

  AssembledLoss out;
  out.breakdown.lambda_long = lambda_long;
  out.breakdown.lambda_short = lambda_short;

  Tensor ce = tape.cross_entropy(student_logits, labels);
  out.breakdown.ce = ce.value();

  const bool use_long = mini_gen_index > 1 && lambda_long > 0.0;
  const bool use_short = mini_gen_index > 1 && lambda_short > 0.0;
  if (!use_long && !use_short) {
    out.total = ce;
    out.breakdown.total = out.total.value();
    return out;
  }

  Tensor weighted;  // lambda_long * klL + lambda_short * klS
  if (use_long) {
    for (int id : ids)
      if (!store.long_valid(id))
        throw std::invalid_argument("assemble_loss: missing long-term teacher row for sample " +
                                    std::to_string(id));
    out.long_rows = store.long_rows(ids);
    Tensor q = softmax_t(out.long_rows, temperature);
    Tensor kl = tape.kl_divergence(student_logits, q, temperature, reverse_kl);
    out.breakdown.kl_long = kl.value();
    weighted = tape.scale(kl, lambda_long);
  }
  if (use_short) {
    for (int id : ids)
      if (!store.short_valid(id))
        throw std::invalid_argument(
            "assemble_loss: missing short-term teacher row for sample " + std::to_string(id));
    out.short_rows = store.short_rows(ids);
    Tensor q = softmax_t(out.short_rows, temperature);
    Tensor kl = tape.kl_divergence(student_logits, q, temperature, reverse_kl);
    out.breakdown.kl_short = kl.value();
    Tensor w = tape.scale(kl, lambda_short);
    weighted = use_long ? tape.add(weighted, w) : w;
  }
  out.total = tape.add(ce, weighted);
  out.breakdown.total = out.total.value();
  return out;
}

}  // namespace lstsd
