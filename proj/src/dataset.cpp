#include "sae/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace sae {
namespace io {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace io

namespace {

constexpr const char* kSchemaComment = "# sae-csv v1";

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

class ErrorList {
 public:
  void add(const std::string& file, int line, const std::string& msg) {
    if (msgs_.size() < 50) {
      std::ostringstream os;
      os << file << ":" << line << ": " << msg;
      msgs_.push_back(os.str());
    }
    ++count_;
  }
  void add(const std::string& msg) {
    if (msgs_.size() < 50) msgs_.push_back(msg);
    ++count_;
  }
  void throw_if_any() const {
    if (count_ == 0) return;
    std::ostringstream os;
    os << count_ << " validation error(s):";
    for (const auto& m : msgs_) os << "\n  " << m;
    throw ValidationError(os.str());
  }

 private:
  std::vector<std::string> msgs_;
  int count_ = 0;
};

bool parse_double(const std::string& s, double& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  char* end = nullptr;
  out = std::strtod(t.c_str(), &end);
  return end == t.c_str() + t.size() && std::isfinite(out);
}

bool parse_ll(const std::string& s, long long& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  char* end = nullptr;
  out = std::strtoll(t.c_str(), &end, 10);
  return end == t.c_str() + t.size();
}

struct RawTable {
  std::vector<std::string> header;
  std::vector<std::pair<int, std::vector<std::string>>> rows;  // (line number, fields)
};

RawTable read_table(const std::string& path, ErrorList& errs) {
  std::ifstream in(path);
  RawTable t;
  if (!in) {
    errs.add("cannot open " + path);
    return t;
  }
  std::string line;
  int lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty()) continue;
    if (s[0] == '#') {
      if (s.rfind("# sae-csv", 0) == 0 && s != kSchemaComment)
        errs.add(path, lineno, "unsupported schema version '" + s + "' (expected '" + kSchemaComment + "')");
      continue;
    }
    auto fields = split_csv(s);
    if (!have_header) {
      t.header = fields;
      have_header = true;
    } else {
      t.rows.emplace_back(lineno, std::move(fields));
    }
  }
  if (!have_header) errs.add("no header row in " + path);
  return t;
}

}  // namespace

SurveyDataset::SurveyDataset(std::vector<UnitRecord> units, std::vector<AreaInfo> areas)
    : units_(std::move(units)), areas_(std::move(areas)) {
  ErrorList errs;
  if (areas_.empty()) errs.add("dataset has no areas");
  if (units_.empty()) errs.add("dataset has no unit records");
  errs.throw_if_any();

  p_ = static_cast<int>(units_.front().x.size());
  std::map<int, int> index;
  for (int i = 0; i < static_cast<int>(areas_.size()); ++i) {
    auto& a = areas_[i];
    if (!index.emplace(a.area_id, i).second) errs.add("duplicate area_id " + std::to_string(a.area_id));
    if (a.N < 1) errs.add("area " + std::to_string(a.area_id) + ": population size N must be >= 1");
    if (a.xbar.size() != p_)
      errs.add("area " + std::to_string(a.area_id) + ": covariate dimension mismatch");
    a.n = 0;
  }
  errs.throw_if_any();

  area_units_.assign(areas_.size(), {});
  record_area_.resize(units_.size());
  for (int r = 0; r < static_cast<int>(units_.size()); ++r) {
    const auto& u = units_[r];
    auto it = index.find(u.area_id);
    if (it == index.end()) {
      errs.add("record references unknown area_id " + std::to_string(u.area_id));
      continue;
    }
    if (u.x.size() != p_) {
      errs.add("record in area " + std::to_string(u.area_id) + ": covariate dimension mismatch");
      continue;
    }
    record_area_[r] = it->second;
    area_units_[it->second].push_back(r);
    ++areas_[it->second].n;
  }
  errs.throw_if_any();

  // Areas with no sampled records are permitted (prediction for out-of-sample
  // areas falls back on the model); oversampling is not.
  for (const auto& a : areas_) {
    if (a.n > a.N)
      errs.add("area " + std::to_string(a.area_id) + ": sampled n=" + std::to_string(a.n) +
               " exceeds population N=" + std::to_string(a.N));
  }
  errs.throw_if_any();

  X_.resize(n(), p_);
  y_.resize(n());
  for (int r = 0; r < n(); ++r) {
    X_.row(r) = units_[r].x.transpose();
    y_(r) = units_[r].y;
  }
  Xbar_.resize(m(), p_);
  for (int i = 0; i < m(); ++i) Xbar_.row(i) = areas_[i].xbar.transpose();
}

int SurveyDataset::area_index(int area_id) const {
  for (int i = 0; i < m(); ++i)
    if (areas_[i].area_id == area_id) return i;
  throw ValidationError("unknown area_id " + std::to_string(area_id));
}

SurveyDataset load_dataset(const std::string& unit_csv_path, const std::string& area_csv_path) {
  ErrorList errs;
  RawTable ut = read_table(unit_csv_path, errs);
  RawTable at = read_table(area_csv_path, errs);
  errs.throw_if_any();

  if (ut.header.size() < 3 || ut.header[0] != "area_id" || ut.header[1] != "unit_id" ||
      ut.header[2] != "y")
    errs.add(unit_csv_path + ": header must start with area_id,unit_id,y");
  if (at.header.size() < 2 || at.header[0] != "area_id" || at.header[1] != "N")
    errs.add(area_csv_path + ": header must start with area_id,N");
  errs.throw_if_any();

  int px = static_cast<int>(ut.header.size()) - 3;
  int pb = static_cast<int>(at.header.size()) - 2;
  if (px != pb)
    errs.add("covariate count mismatch: " + std::to_string(px) + " x columns vs " +
             std::to_string(pb) + " xbar columns");
  errs.throw_if_any();

  std::vector<UnitRecord> units;
  units.reserve(ut.rows.size());
  for (const auto& [lineno, f] : ut.rows) {
    if (static_cast<int>(f.size()) != 3 + px) {
      errs.add(unit_csv_path, lineno, "expected " + std::to_string(3 + px) + " fields, got " +
                                          std::to_string(f.size()));
      continue;
    }
    UnitRecord u;
    long long aid = 0, uid = 0;
    bool ok = parse_ll(f[0], aid) && parse_ll(f[1], uid) && parse_double(f[2], u.y);
    u.x.resize(px + 1);
    u.x(0) = 1.0;
    for (int j = 0; j < px && ok; ++j) {
      double xv = 0.0;
      ok = parse_double(f[3 + j], xv);
      u.x(1 + j) = xv;
    }
    if (!ok) {
      errs.add(unit_csv_path, lineno, "non-numeric or non-finite field");
      continue;
    }
    u.area_id = static_cast<int>(aid);
    u.unit_id = static_cast<int>(uid);
    units.push_back(std::move(u));
  }

  std::vector<AreaInfo> areas;
  areas.reserve(at.rows.size());
  for (const auto& [lineno, f] : at.rows) {
    if (static_cast<int>(f.size()) != 2 + pb) {
      errs.add(area_csv_path, lineno, "expected " + std::to_string(2 + pb) + " fields, got " +
                                          std::to_string(f.size()));
      continue;
    }
    AreaInfo a;
    long long aid = 0;
    bool ok = parse_ll(f[0], aid) && parse_ll(f[1], a.N);
    a.xbar.resize(pb + 1);
    a.xbar(0) = 1.0;
    for (int j = 0; j < pb && ok; ++j) {
      double xv = 0.0;
      ok = parse_double(f[2 + j], xv);
      a.xbar(1 + j) = xv;
    }
    if (!ok) {
      errs.add(area_csv_path, lineno, "non-numeric or non-finite field");
      continue;
    }
    a.area_id = static_cast<int>(aid);
    areas.push_back(std::move(a));
  }
  errs.throw_if_any();

  return SurveyDataset(std::move(units), std::move(areas));
}

void save_dataset(const SurveyDataset& data, const std::string& unit_csv_path,
                  const std::string& area_csv_path) {
  const int px = data.p() - 1;
  {
    std::ofstream out(unit_csv_path);
    if (!out) throw ValidationError("cannot write " + unit_csv_path);
    out << kSchemaComment << "\n";
    out << "area_id,unit_id,y";
    for (int j = 1; j <= px; ++j) out << ",x" << j;
    out << "\n";
    for (const auto& u : data.units()) {
      out << u.area_id << "," << u.unit_id << "," << io::fmt_double(u.y);
      for (int j = 1; j <= px; ++j) out << "," << io::fmt_double(u.x(j));
      out << "\n";
    }
  }
  {
    std::ofstream out(area_csv_path);
    if (!out) throw ValidationError("cannot write " + area_csv_path);
    out << kSchemaComment << "\n";
    out << "area_id,N";
    for (int j = 1; j <= px; ++j) out << ",xbar" << j;
    out << "\n";
    for (const auto& a : data.areas()) {
      out << a.area_id << "," << a.N;
      for (int j = 1; j <= px; ++j) out << "," << io::fmt_double(a.xbar(j));
      out << "\n";
    }
  }
}

Eigen::VectorXd residual(const SurveyDataset& data, const Eigen::VectorXd& beta,
                         const Eigen::VectorXd& v) {
  if (beta.size() != data.p()) throw ValidationError("residual: beta dimension mismatch");
  if (v.size() != data.m()) throw ValidationError("residual: v dimension mismatch");
  Eigen::VectorXd r = data.y() - data.X() * beta;
  for (int i = 0; i < data.n(); ++i) r(i) -= v(data.record_area()[i]);
  return r;
}

Eigen::VectorXd theta(const SurveyDataset& data, const Eigen::VectorXd& beta,
                      const Eigen::VectorXd& v) {
  if (beta.size() != data.p()) throw ValidationError("theta: beta dimension mismatch");
  if (v.size() != data.m()) throw ValidationError("theta: v dimension mismatch");
  return data.Xbar() * beta + v;
}

double compose_area_mean(const std::vector<double>& sampled_y,
                         const std::vector<double>& unsampled_pred, long long N_i) {
  if (static_cast<long long>(sampled_y.size()) + static_cast<long long>(unsampled_pred.size()) !=
      N_i)
    throw ValidationError("compose_area_mean: sampled + unsampled counts must equal N_i");
  double s = 0.0;
  for (double v : sampled_y) s += v;
  for (double v : unsampled_pred) s += v;
  return s / static_cast<double>(N_i);
}

}  // namespace sae
